//! Seed derivation and RNG construction.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub type SamplerRng = ChaCha20Rng;

/// Derives a child seed from a master seed and a path of indices
/// (e.g. `[replicate, stage]`), hashing so sibling streams do not overlap.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(b"msmm-seed");
    hasher.update(master.to_le_bytes());
    for p in path {
        hasher.update(p.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_from_seed(seed: u64) -> SamplerRng {
    SamplerRng::seed_from_u64(seed)
}
