//! Random hyperparameter search with a small trial budget.
//!
//! Run with `cargo run --release --example random_search`.

use msin::data::{corpus_tokens, make_samples, SampleConfig, SplitRule, Vocab};
use msin::model::ModelConfig;
use msin::synth::{generate, SynthSpec};
use msin::train::{random_search, SearchSpace, TrainConfig};

fn main() -> anyhow::Result<()> {
    let (corpus, series) = generate(&SynthSpec { n_days: 250, ..SynthSpec::default() })?;
    let tokens = corpus_tokens(&corpus, 8);
    let vocab = Vocab::build(tokens.iter().map(String::as_str), 1000, None);
    let base = ModelConfig {
        vocab_size: vocab.len(),
        max_len: 8,
        d_w: 8,
        ..ModelConfig::default()
    };
    let space = SearchSpace {
        d_s: vec![4, 8],
        d_h: vec![4, 8],
        ..SearchSpace::default()
    };
    let tc = TrainConfig {
        max_steps: 40,
        eval_every: 20,
        ..TrainConfig::default()
    };
    let board = random_search(&space, 4, 17, &base, &tc, |window| {
        let sc = SampleConfig {
            window,
            max_len: 8,
            daily_doc_cap: 10,
            split: SplitRule::default(),
        };
        Ok(make_samples(&corpus, &series, &vocab, &sc, None)?)
    })?;
    for e in &board {
        println!(
            "trial {} valid {:.5} d_s={} d_h={} window={} l2={} dropout={}",
            e.trial, e.valid_loss, e.config.d_s, e.config.d_h, e.config.window, e.config.l2, e.config.dropout
        );
    }
    Ok(())
}
