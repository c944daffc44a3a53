//! Seed derivation. Every stochastic component owns a `ChaCha8Rng` derived
//! from the master seed and a fixed stream label, so results never depend on
//! worker count or scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a path of stream ids.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

pub fn rng_from(seed: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, path))
}

/// Stream labels used across the crate.
pub mod stream {
    pub const DATASET: u64 = 1;
    pub const PLANNER: u64 = 2;
    pub const CONTROLLER: u64 = 3;
    pub const ROLLOUT: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const DAL: u64 = 6;
    pub const DAGGER: u64 = 7;
    pub const FUSION: u64 = 8;
    pub const MPC: u64 = 9;
    pub const INIT: u64 = 10;
    pub const SHUFFLE: u64 = 11;
}
