//! Seed derivation. Every stochastic step in the crate draws from a ChaCha
//! stream keyed by a base seed and a short list of integer tags, so results
//! never depend on call order across modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes `tags` into `base` to obtain an independent sub-seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

// Stream tags.
pub const TAG_GENERATE: u64 = 1;
pub const TAG_SPLIT: u64 = 2;
pub const TAG_MINE: u64 = 3;
pub const TAG_INIT: u64 = 4;
pub const TAG_NOISE: u64 = 5;
pub const TAG_MONITOR: u64 = 6;
pub const TAG_PROBE: u64 = 7;
pub const TAG_AUDIT: u64 = 8;
pub const TAG_THEORY: u64 = 9;
