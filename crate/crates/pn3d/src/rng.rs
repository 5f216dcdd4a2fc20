//! Deterministic RNG streams.
//!
//! Every random draw in the system comes from a stream derived functionally
//! from the master seed plus a domain label and indices. Streams never flow
//! across stage or epoch boundaries, so resuming training from a checkpoint
//! reproduces the exact draw sequence of an uninterrupted run.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derive an independent RNG stream from the master seed, a label, and indices.
pub fn stream(seed: u64, label: &str, indices: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for b in label.bytes() {
        h = splitmix64(h ^ b as u64);
    }
    for &i in indices {
        h = splitmix64(h ^ i);
    }
    ChaCha8Rng::seed_from_u64(h)
}
