//! Federated-learning simulation: data, local models, the channel, and the
//! round loop.

pub mod channel;
pub mod data;
pub mod fl;
pub mod model;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Independent RNG stream for `(seed, tag, a, b)`.
///
/// Streams for different tags or indices never share state, so draws do not
/// depend on evaluation order or thread count.
pub fn stream_rng(seed: u64, tag: &str, a: u64, b: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    h.update(seed.to_le_bytes());
    h.update(a.to_le_bytes());
    h.update(b.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
