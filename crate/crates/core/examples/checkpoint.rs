//! Saves a model checkpoint, reloads it and shows that corruption is
//! detected.
//!
//! Run with `cargo run --example checkpoint`.

use msin::checkpoint::{Checkpoint, CheckpointMeta};
use msin::model::{ModelConfig, ModelParams, Variant};
use msin::rng::{seeded, Stream};
use msin::train::TrainConfig;

fn main() -> anyhow::Result<()> {
    let cfg = ModelConfig::tiny(Variant::Msin);
    let ck = Checkpoint {
        params: ModelParams::init(&cfg, &mut seeded(5, Stream::Init))?,
        train: TrainConfig::default(),
        meta: CheckpointMeta {
            step: 0,
            seed: 5,
            metric: None,
            vocab: (0..cfg.vocab_size).map(|i| format!("tok{i}")).collect(),
            normalizer: None,
            split: None,
        },
    };
    let mut bytes = Vec::new();
    ck.write(&mut bytes)?;
    println!("checkpoint: {} bytes, magic {:?}", bytes.len(), std::str::from_utf8(&bytes[..4])?);

    let back = Checkpoint::read(bytes.as_slice())?;
    let mut again = Vec::new();
    back.write(&mut again)?;
    println!("round trip byte-identical: {}", again == bytes);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    println!("corrupt magic: {}", Checkpoint::read(bad.as_slice()).unwrap_err());
    println!("truncated: {}", Checkpoint::read(&bytes[..bytes.len() - 3]).unwrap_err());
    Ok(())
}
