//! Seeded random streams.
//!
//! Every randomized step in the pipeline draws from a stream derived from
//! `(run seed, sample id)`, so outputs are reproducible regardless of corpus
//! order or dispatch concurrency.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Deterministic per-sample stream: ChaCha8 keyed by
/// `SHA-256(seed as little-endian u64 bytes || sample id UTF-8 bytes)`.
pub fn stream(seed: u64, sample_id: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(sample_id.as_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// Uniform draw on the half-open unit interval shifted to `(0, 1]`, so that a
/// threshold of exactly 0 never fires and a threshold of 1 always does.
pub fn unit_draw<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    1.0 - rng.random::<f64>()
}
