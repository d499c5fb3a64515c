//! Named random streams derived from one user seed.
//!
//! Each purpose draws from its own ChaCha stream, so adding draws to one
//! purpose never shifts the numbers another purpose sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init,
    Shuffle,
    Dropout,
    Synth,
    Search,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Shuffle => 2,
            Stream::Dropout => 3,
            Stream::Synth => 4,
            Stream::Search => 5,
        }
    }
}

/// Generator for `stream` under `seed`. `keys` further split the stream,
/// e.g. dropout masks are keyed by step and sample index.
pub fn stream_rng(seed: u64, stream: Stream, keys: [u64; 3]) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    for (k, key) in keys.iter().enumerate() {
        bytes[8 * (k + 1)..8 * (k + 2)].copy_from_slice(&key.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(bytes);
    rng.set_stream(stream.id());
    rng
}

pub fn seeded(seed: u64, stream: Stream) -> ChaCha8Rng {
    stream_rng(seed, stream, [0; 3])
}
