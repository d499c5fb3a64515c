//! Runs the multi-step interrelation cell over a five-day window and prints
//! how the document attention shifts from step to step.
//!
//! Run with `cargo run --example interrelation_cell`.

use msin::model::{predict, random_sample, ModelConfig, ModelParams, Variant};
use msin::rng::{seeded, Stream};

fn main() -> anyhow::Result<()> {
    let cfg = ModelConfig {
        vocab_size: 40,
        window: 5,
        max_len: 6,
        d_w: 8,
        d_h: 6,
        d_s: 8,
        ..ModelConfig::default()
    };
    let mut rng = seeded(9, Stream::Init);
    let params = ModelParams::init(&cfg, &mut rng)?;
    let sample = random_sample(&cfg, 4, &mut rng);
    let (pred, trace) = predict(&params, &sample)?;

    println!("step  attention over 4 documents");
    for (t, p) in trace.per_step.iter().enumerate() {
        let row: Vec<String> = p.iter().map(|x| format!("{x:.4}")).collect();
        println!("{:>4}  {}", t + 1, row.join("  "));
    }
    println!("prediction {:.4} (up = {})", pred.value, pred.up);

    // same weights without the document-to-gate path
    let wo = ModelParams::init(&ModelConfig { variant: Variant::LstmWo, ..cfg.clone() }, &mut seeded(9, Stream::Init))?;
    let (p_wo, t_wo) = predict(&wo, &sample)?;
    println!("lstm_wo attends once: {:?}, prediction {:.4}", t_wo.per_step.len(), p_wo.value);
    Ok(())
}
