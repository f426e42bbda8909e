//! Seed derivation for reproducible random streams.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`]. Independent
//! streams are derived from a root seed and a path of integer labels
//! (frame, agent, stage, ...) by folding the labels through SplitMix64, so
//! a frame processed on its own, in parallel, or in a batch sees the same
//! numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stage labels used when deriving per-stage streams.
pub mod stage {
    pub const SCENE_LAYOUT: u64 = 0x10;
    pub const SCENE_SCAN: u64 = 0x11;
    pub const CORRUPTION: u64 = 0x20;
    pub const HEAD_WEIGHTS: u64 = 0x30;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `root` and a label path.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(root), |acc, &label| splitmix64(acc ^ splitmix64(label)))
}

/// The generator every operator uses for a given seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
