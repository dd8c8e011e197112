//! Seed derivation. Every stochastic choice in the pipeline draws from an
//! RNG keyed by `(master seed, stage tag, item id)`, never by call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a 64-bit seed from a master seed, a stage tag and an item id.
///
/// The derivation is a SHA-256 over a length-prefixed encoding, so it is
/// stable across platforms and releases.
pub fn derive_seed(master: u64, tag: &str, item: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update((tag.len() as u64).to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update((item.len() as u64).to_le_bytes());
    hasher.update(item.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_for(master: u64, tag: &str, item: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag, item))
}
