//! Seeded random number generation.
//!
//! Every stochastic component in the crate draws from a [`ChaCha8Rng`] derived
//! from an explicit seed, so runs are reproducible across platforms. Distinct
//! pipeline stages use distinct stream labels to keep their draws independent
//! of each other's call counts.

use rand_chacha::rand_core::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

/// A named RNG stream: `seeded(seed, label)` always yields the same generator.
pub fn seeded(seed: u64, label: &str) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    let h = fnv1a(label.as_bytes());
    key[8..16].copy_from_slice(&h.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Sub-stream of a labeled stream, e.g. one per epoch or per sample.
pub fn seeded_sub(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(label.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}
