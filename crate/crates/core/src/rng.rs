//! Seeded, splittable random streams.
//!
//! A stream is keyed by `(seed, stream_id)`; the key is hashed into a ChaCha8
//! seed so that distinct labels give independent sequences and the same label
//! always replays the same draws on every platform.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

pub struct RngStream {
    seed: u64,
    stream_id: String,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: impl Into<String>) -> Self {
        let stream_id = stream_id.into();
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update(b"/");
        hasher.update(stream_id.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        Self {
            seed,
            stream_id,
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> &str {
        &self.stream_id
    }

    /// A fresh, independent stream labelled `"{stream_id}/{label}"`.
    pub fn split(&self, label: &str) -> RngStream {
        RngStream::new(self.seed, format!("{}/{label}", self.stream_id))
    }

    pub fn uniform(&mut self, low: f32, high: f32) -> f32 {
        low + (high - low) * self.inner.random::<f32>()
    }

    pub fn normal(&mut self) -> f32 {
        self.inner.sample(StandardNormal)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

/// Derives a child seed from a parent seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    RngStream::new(seed, label).next_u64()
}
