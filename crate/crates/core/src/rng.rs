//! Deterministic random stream derivation.
//!
//! Every source of randomness in the simulator is a [`ChaCha8Rng`] derived
//! from the experiment seed plus a domain label and integer coordinates
//! (client id, round, ...). Streams for distinct coordinates are independent,
//! so clients can run in any order — or in parallel — and still consume
//! bit-identical randomness.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive an independent random stream from `(seed, domain, coords)`.
pub fn stream(seed: u64, domain: &str, coords: &[u64]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((domain.len() as u64).to_le_bytes());
    hasher.update(domain.as_bytes());
    for &c in coords {
        hasher.update(c.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
