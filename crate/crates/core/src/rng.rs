//! Seeded random streams.
//!
//! Every stochastic component draws from SplitMix64 (64-bit state, Steele,
//! Lea & Flood 2014), which is portable and fully specified. Independent
//! streams are derived by hashing a component name together with the seed,
//! so adding a component never shifts the draws of another.

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::SeedableRng;
pub use rand_xoshiro::SplitMix64;

/// 64-bit FNV-1a hash of a byte string.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Seed of the stream named `name` under the global `seed`.
pub fn component_seed(seed: u64, name: &str) -> u64 {
    stable_hash(name.as_bytes()) ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn component_rng(seed: u64, name: &str) -> SplitMix64 {
    SplitMix64::seed_from_u64(component_seed(seed, name))
}
