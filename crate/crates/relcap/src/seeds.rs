//! Per-purpose RNG derivation.
//!
//! Every random draw in the pipeline comes from a stream derived from the
//! base seed plus a purpose tag (and optionally indices like epoch or record
//! number). Streams are independent of each other and of call order, which
//! is what makes checkpoint-resumed runs bit-identical to uninterrupted
//! ones.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub const SCENE: u64 = 0x5ce7e;
pub const QUESTION: u64 = 0x9ae57;
pub const FEATURES: u64 = 0xfea7;
pub const INIT: u64 = 0x1417;
pub const ORDER: u64 = 0x04de4;
pub const SAMPLE: u64 = 0x5a3b1e;

/// SplitMix64 finalizer; good avalanche for cheap key mixing.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a generator from the base seed and a tag path.
pub fn derive(base: u64, tags: &[u64]) -> ChaCha12Rng {
    let mut state = mix(base);
    for t in tags {
        state = mix(state ^ mix(*t));
    }
    ChaCha12Rng::seed_from_u64(state)
}
