//! Seed plumbing.
//!
//! Every random draw in the crate comes from a SplitMix64 stream. Independent
//! streams are derived by hashing the parent seed together with a small tuple
//! of stream identifiers, so results never depend on evaluation order.

use rand::SeedableRng;
pub use rand_xoshiro::SplitMix64;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a list of stream ids.
pub fn derive_seed(seed: u64, ids: &[u64]) -> u64 {
    ids.iter().fold(mix64(seed.wrapping_add(GOLDEN)), |acc, &id| {
        mix64(acc ^ mix64(id.wrapping_add(GOLDEN)))
    })
}

pub fn stream(seed: u64, ids: &[u64]) -> SplitMix64 {
    SplitMix64::seed_from_u64(derive_seed(seed, ids))
}
