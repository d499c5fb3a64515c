//! Trains a small model on synthetic data with Adam and early stopping, then
//! prints the loss history.
//!
//! Run with `cargo run --release --example training`.

use msin::data::{corpus_tokens, make_samples, SampleConfig, SplitRule, Vocab};
use msin::model::{ModelConfig, ModelParams};
use msin::rng::{seeded, Stream};
use msin::synth::{generate, SynthSpec};
use msin::train::{train, write_history, TrainConfig};

fn main() -> anyhow::Result<()> {
    let (corpus, series) = generate(&SynthSpec { n_days: 400, ..SynthSpec::default() })?;
    let tokens = corpus_tokens(&corpus, 8);
    let vocab = Vocab::build(tokens.iter().map(String::as_str), 1000, None);
    let sc = SampleConfig {
        window: 5,
        max_len: 8,
        daily_doc_cap: 10,
        split: SplitRule::default(),
    };
    let data = make_samples(&corpus, &series, &vocab, &sc, None)?;
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        max_len: 8,
        d_w: 12,
        d_h: 12,
        d_s: 12,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        learning_rate: 3e-3,
        max_steps: 300,
        eval_every: 25,
        ..TrainConfig::default()
    };
    let params = ModelParams::init(&cfg, &mut seeded(tc.seed, Stream::Init))?;
    let out = train(params, &data, &tc)?;
    write_history(&out.history, std::io::stdout().lock())?;
    println!(
        "best validation loss {:.5} at step {} after {} steps{}",
        out.best_valid,
        out.best_step,
        out.steps_run,
        if out.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(())
}
