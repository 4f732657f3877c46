//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a base seed and a small tuple of stream labels, so results never
//! depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combine a base seed with stream labels into a new seed.
pub fn derive_seed(base: u64, labels: &[u64]) -> u64 {
    labels.iter().fold(mix(base), |acc, &l| mix(acc ^ mix(l)))
}

pub fn rng_for(base: u64, labels: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, labels))
}
