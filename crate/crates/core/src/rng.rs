//! Seeded random streams.
//!
//! Every random draw in the pipeline comes from a stream identified by a
//! global seed plus a tuple of tags (purpose, volume index, iteration, ...),
//! so results never depend on the order in which streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod tag {
    pub const BATCH_ORDER: u64 = 1;
    pub const DEFORM: u64 = 2;
    pub const HIST_REF: u64 = 3;
    pub const SYNTH_CASE: u64 = 4;
    pub const MODEL_INIT: u64 = 5;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed and tags into one 64-bit stream key.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}
