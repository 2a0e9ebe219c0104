//! Seeded, named random streams.
//!
//! Every random quantity in a session comes from its own ChaCha20 stream,
//! keyed by the session seed and a label. Streams are independent of each
//! other and stable across platforms and releases.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub type SessionRng = ChaCha20Rng;

/// Derives a 64-bit sub-seed from `seed` and a purpose label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn stream(seed: u64, label: &str) -> SessionRng {
    ChaCha20Rng::seed_from_u64(derive_seed(seed, label))
}
