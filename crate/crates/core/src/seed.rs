//! Keyed random streams.
//!
//! Every stochastic choice in the crate draws from a stream keyed by
//! `(seed, tag, index)`, so results never depend on iteration order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Independent RNG for `(seed, tag, index)`.
pub fn stream(seed: u64, tag: &str, index: u64) -> StreamRng {
    ChaCha8Rng::from_seed(key(seed, tag, index))
}

/// 64-bit child seed for `(seed, tag, index)`.
pub fn child_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let k = key(seed, tag, index);
    u64::from_le_bytes(k[..8].try_into().expect("8 bytes"))
}

fn key(seed: u64, tag: &str, index: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    h.finalize().into()
}
