//! Deterministic seed derivation.
//!
//! Every random quantity in an experiment is keyed by a sub-seed derived from
//! a parent seed and a path of integer tags, so independent jobs can run in
//! any order (or on any thread) and still reproduce bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `parent` and a path of tags.
pub fn derive(parent: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(parent), |acc, &t| mix(acc ^ mix(t)))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Well-known tags so different consumers of one parent seed never collide.
pub mod tag {
    pub const DATA: u64 = 1;
    pub const REPLACEMENT: u64 = 2;
    pub const PROBE: u64 = 3;
    pub const POPULATION: u64 = 4;
    pub const ALGORITHM: u64 = 5;
    pub const INDICES: u64 = 6;
    pub const GHOST: u64 = 7;
    pub const REFERENCE: u64 = 8;
    pub const CELL: u64 = 9;
}
