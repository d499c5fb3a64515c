//! Trains on the planted-association corpus and checks whether the
//! document attention finds the planted headline of each test day.
//!
//! Run with `cargo run --release --example synthetic_recovery [variant] [steps]`.
//! Defaults: `msin` for 6000 steps, several minutes on one core.

use std::time::Instant;

use msin::data::{corpus_tokens, make_samples, SampleConfig, SplitRule, Vocab};
use msin::eval::{rank_by_mass, rank_report};
use msin::model::{ModelConfig, ModelParams, Variant};
use msin::rng::{seeded, Stream};
use msin::synth::{generate, SynthSpec};
use msin::train::{train_observed, TrainConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let variant: Variant = args.next().as_deref().unwrap_or("msin").parse().map_err(anyhow::Error::msg)?;
    let steps: usize = args.next().map_or(Ok(6000), |s| s.parse())?;

    let spec = SynthSpec::default();
    let (corpus, series) = generate(&spec)?;
    let tokens = corpus_tokens(&corpus, 8);
    let vocab = Vocab::build(tokens.iter().map(String::as_str), 5000, None);
    let day = |i: u64| spec.start + chrono::Days::new(i);
    let sc = SampleConfig {
        window: 5,
        max_len: 8,
        daily_doc_cap: 10,
        split: SplitRule::Dates {
            train_until: day(1999),
            valid_until: day(2099),
        },
    };
    let data = make_samples(&corpus, &series, &vocab, &sc, None)?;
    println!("samples: train {}, valid {}, test {}", data.train.len(), data.valid.len(), data.test.len());

    let cfg = ModelConfig {
        variant,
        d_s: 16,
        d_h: 16,
        d_w: 16,
        d_a: Some(128),
        vocab_size: vocab.len(),
        window: 5,
        max_len: 8,
        daily_doc_cap: 10,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        learning_rate: 3e-3,
        max_steps: steps,
        eval_every: 250,
        patience: steps,
        ..TrainConfig::default()
    };
    let params = ModelParams::init(&cfg, &mut seeded(tc.seed, Stream::Init))?;
    let t0 = Instant::now();
    let out = train_observed(params, &data.train, &data.valid, &tc, |r| {
        if let Some(v) = r.valid_loss {
            println!("step {:>5}  valid {v:.5}  {:.0}s", r.step, t0.elapsed().as_secs_f64());
        }
    })?;

    let (report, days) = rank_report(&out.params, &data.test, 5, 1)?;
    if !report.relevance.available {
        println!("{} has no document attention; mse {:.5}", variant.name(), report.mse.unwrap_or(f64::NAN));
        return Ok(());
    }
    // hits split by the sign of the planted word
    let mut hits = [[0usize; 2]; 2];
    for (rec, s) in days.iter().zip(&data.test) {
        let g = rec.gtn[0];
        let positive = s.docs.texts()[g].split(' ').any(|w| w.starts_with('p'));
        let top = rank_by_mass(rec.mass.as_deref().expect("attention available"))[0] == g;
        hits[positive as usize][0] += top as usize;
        hits[positive as usize][1] += 1;
    }
    for m in &report.per_k {
        println!("k={}  Pre {:.3}  Rec {:.3}", m.k, m.pre, m.rec);
    }
    println!(
        "top-1 hits: positive {}/{}, negative {}/{}; test mse {:.5}",
        hits[1][0],
        hits[1][1],
        hits[0][0],
        hits[0][1],
        report.mse.unwrap_or(f64::NAN)
    );
    Ok(())
}
