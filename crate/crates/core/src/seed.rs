//! Child-seed derivation and the crate's RNG type.
//!
//! Every random stream (data order, noising, initialization, GPR sampling)
//! gets its own seed derived from the master seed and a purpose string, so
//! adding a consumer never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// `hash(master, purpose)` truncated to 64 bits.
pub fn derive(master: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(purpose.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest is 32 bytes"))
}

/// Child seed indexed by an integer, e.g. a step or sequence number.
pub fn derive_indexed(master: u64, purpose: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(purpose.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest is 32 bytes"))
}

pub fn rng(master: u64, purpose: &str) -> Rng {
    Rng::seed_from_u64(derive(master, purpose))
}

pub fn rng_indexed(master: u64, purpose: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_indexed(master, purpose, index))
}
