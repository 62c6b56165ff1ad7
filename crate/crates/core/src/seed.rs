//! Deterministic seed fan-out.
//!
//! Every stage draws its randomness from a `ChaCha8Rng` seeded by
//! [`derive_seed`]: the first eight bytes (little-endian) of
//! `SHA-256(master_le64 || tag_utf8 || 0x00 || index_le64)`. Stage seeds
//! therefore depend only on the master seed, a stage tag and an index, so
//! re-running a single repetition or a single stage reproduces it exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update([0u8]);
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(master: u64, tag: &str, index: u64) -> ChaCha8Rng {
    rng_from(derive_seed(master, tag, index))
}
