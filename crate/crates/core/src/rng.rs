//! Seeded randomness shared by every stochastic stage.
//!
//! All randomness goes through ChaCha8 (`rand_chacha::ChaCha8Rng`), whose
//! output stream is fixed by its reference specification and therefore
//! identical across platforms and releases. Sub-streams are derived by
//! hashing a base seed with a stage label, so adding a new consumer never
//! perturbs an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent seed for `label` from `base`.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}
