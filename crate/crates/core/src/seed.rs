//! Seed derivation.
//!
//! Every random stream in the lab is a ChaCha8 generator keyed by a child seed.
//! A child seed is the first eight bytes (little endian) of
//! `SHA-256(parent_seed.to_le_bytes() || label)`, so one root seed fans out into
//! independent, named streams ("teacher/init", "synth/noise/17", ...).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(parent.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Child seed for the `index`-th unit of a stage (trajectory, round, ...).
pub fn derive_indexed(parent: u64, label: &str, index: u64) -> u64 {
    derive_seed(parent, &format!("{label}/{index}"))
}

pub fn rng_for(parent: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parent, label))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
