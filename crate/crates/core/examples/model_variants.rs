//! Lists the parameter manifest of each model variant and runs one
//! prediction with each.
//!
//! Run with `cargo run --example model_variants`.

use msin::model::{predict, random_sample, ModelConfig, ModelParams, Variant};
use msin::rng::{seeded, Stream};

fn main() -> anyhow::Result<()> {
    let mut rng = seeded(1, Stream::Init);
    let base = ModelConfig {
        vocab_size: 50,
        d_w: 8,
        d_h: 8,
        d_s: 8,
        ..ModelConfig::default()
    };
    let sample = random_sample(&base, 6, &mut rng);
    for variant in Variant::ALL {
        let cfg = ModelConfig { variant, ..base.clone() };
        let params = ModelParams::init(&cfg, &mut seeded(1, Stream::Init))?;
        println!("{} ({} scalars)", variant.name(), params.num_scalars());
        for s in params.specs() {
            println!("  {:<22} {:?}", s.name, s.shape);
        }
        let (pred, _) = predict(&params, &sample)?;
        match &pred.relevance {
            Some(r) => println!("  prediction {:.4}, top document {}", pred.value, msin::eval::rank_by_mass(r)[0] + 1),
            None => println!("  prediction {:.4}, no document attention", pred.value),
        }
    }
    Ok(())
}
