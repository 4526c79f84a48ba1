//! Deterministic seed derivation.
//!
//! Child seeds come from folding indices into a base seed with the
//! SplitMix64 finalizer, so each `(base, i, j)` cell gets its own stream and
//! nearby indices give unrelated seeds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 output function (Steele, Lea and Flood constants).
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `splitmix64(splitmix64(splitmix64(base) ^ i) ^ j)`.
pub fn mix_seed(base: u64, i: u64, j: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ i) ^ j)
}

pub fn rng_for(base: u64, i: u64, j: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(base, i, j))
}
