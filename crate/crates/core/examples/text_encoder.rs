//! Encodes one day of headlines with the bidirectional LSTM and word
//! attention, printing each document's attention over its words.
//!
//! Run with `cargo run --example text_encoder`.

use msin::data::{tokenize, DocumentBatch, Sample, SeriesWindow, Vocab};
use msin::model::{forward, ModelConfig, ModelParams, ModelVars, Variant};
use msin::rng::{seeded, Stream};
use msin::tape::Tape;

fn main() -> anyhow::Result<()> {
    let headlines = [
        "apple unveils new iphone at september event",
        "markets drift lower ahead of fed minutes",
        "apple supplier warns on weak demand",
    ];
    let max_len = 8;
    let tokens: Vec<Vec<String>> = headlines.iter().map(|h| tokenize(h, max_len)).collect();
    let vocab = Vocab::build(tokens.iter().flatten().map(String::as_str), 100, None);
    let ids: Vec<Vec<usize>> = tokens.iter().map(|t| vocab.encode(t)).collect();

    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        max_len,
        window: 3,
        d_w: 8,
        d_h: 6,
        d_s: 6,
        ..ModelConfig::default()
    };
    let params = ModelParams::init(&cfg, &mut seeded(3, Stream::Init))?;
    let sample = Sample {
        window: SeriesWindow {
            date: chrono::NaiveDate::from_ymd_opt(2013, 9, 10).unwrap(),
            values: vec![0.1, 0.2, 0.15],
            dim: 1,
            target: 0.0,
            prev: 0.15,
            target_raw: 0.0,
            prev_raw: 0.15,
        },
        docs: DocumentBatch::new(&ids, max_len, vec![None; 3], headlines.map(String::from).to_vec()),
    };

    let mut tape = Tape::<f32>::new();
    let vars = params.register(&mut tape)?;
    let mv = ModelVars::bind(&cfg, &vars)?;
    let out = forward::<f32, rand_chacha::ChaCha8Rng>(&mut tape, &mv, &cfg, &sample, None)?;
    let dims = tape.shape(out.docs).to_vec();
    println!("document vectors: {} x {} ({} variant)", dims[0], dims[1], Variant::Msin.name());
    let beta = tape.value(out.word_attention).to_vec();
    let width = tape.shape(out.word_attention)[1];
    for (j, toks) in tokens.iter().enumerate() {
        println!("doc {}:", j + 1);
        for (k, t) in toks.iter().enumerate() {
            println!("  {t:<10} {:.3}", beta[j * width + k]);
        }
    }
    Ok(())
}
