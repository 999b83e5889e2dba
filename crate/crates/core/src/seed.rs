//! Deterministic seed derivation.
//!
//! Every random stream in a run is keyed by a path of integers
//! (base seed, task, candidate, purpose...) so that any piece of work can be
//! recomputed in isolation, in any order, with identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes mixed into derived seeds.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const CANDIDATE_MASK: u64 = 2;
    pub const SHORT_TRAIN: u64 = 3;
    pub const FULL_TRAIN: u64 = 4;
    pub const KMEANS: u64 = 5;
    pub const PERMUTATION: u64 = 6;
    pub const CLASS_SPLIT: u64 = 7;
    pub const BLOBS: u64 = 8;
    pub const VALIDATION: u64 = 9;
    pub const RETRY: u64 = 10;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into `base`, one splitmix round per part.
pub fn derive(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
