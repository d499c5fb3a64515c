//! Writes a synthetic corpus and series to disk, reads them back and aligns
//! them into windowed samples.
//!
//! Run with `cargo run --example data_pipeline`.

use std::fs::File;
use std::io::BufReader;

use msin::data::{corpus_tokens, make_samples, Corpus, SampleConfig, Series, SplitRule, Vocab};
use msin::synth::{generate, SynthSpec};

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let spec = SynthSpec {
        n_days: 200,
        docs_min: 3,
        docs_max: 12,
        ..SynthSpec::default()
    };
    let (corpus, series) = generate(&spec)?;
    corpus.write_jsonl(File::create(dir.path().join("corpus.jsonl"))?)?;
    series.write_csv(File::create(dir.path().join("series.csv"))?)?;

    let corpus = Corpus::read_jsonl(BufReader::new(File::open(dir.path().join("corpus.jsonl"))?))?;
    let series = Series::read_csv(File::open(dir.path().join("series.csv"))?)?;
    let first = &corpus.days()[0];
    println!("{} days; {} has {} headlines, e.g. {:?}", corpus.days().len(), first.date, first.headlines.len(), first.headlines[0].text);

    let tokens = corpus_tokens(&corpus, 8);
    let vocab = Vocab::build(tokens.iter().map(String::as_str), 300, None);
    println!("vocabulary {} of {} distinct tokens", vocab.len(), {
        let mut t = tokens.clone();
        t.sort();
        t.dedup();
        t.len()
    });

    let cfg = SampleConfig {
        window: 5,
        max_len: 8,
        daily_doc_cap: 8,
        split: SplitRule::default(),
    };
    let data = make_samples(&corpus, &series, &vocab, &cfg, None)?;
    println!("{:#?}", data.report);
    let s = &data.train[0];
    println!("first sample {}: window {:?} -> target {:.3}, {} documents, ground truth {:?}", s.window.date, s.window.values, s.window.target, s.docs.len(), s.docs.ground_truth());
    Ok(())
}
