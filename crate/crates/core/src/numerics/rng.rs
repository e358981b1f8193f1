use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::Tensor;

/// Seeded, counter-based random stream.
///
/// Every stochastic operation draws from a sub-stream derived from the root
/// seed and a fixed label path, so results never depend on the order in which
/// unrelated consumers were invoked.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    key: [u8; 32],
    inner: ChaCha8Rng,
}

impl Rng {
    pub const ALGORITHM: &'static str = "chacha8/sha256-labels";

    pub fn new(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"flatdiff-root");
        h.update(seed.to_le_bytes());
        Self::from_key(seed, h.finalize().into())
    }

    fn from_key(seed: u64, key: [u8; 32]) -> Self {
        Self {
            seed,
            key,
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream named by `label`; does not advance `self`.
    pub fn substream(&self, label: &str) -> Rng {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        Self::from_key(self.seed, h.finalize().into())
    }

    pub fn substream_indexed(&self, label: &str, index: u64) -> Rng {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        h.update(index.to_le_bytes());
        Self::from_key(self.seed, h.finalize().into())
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits.
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "empty range");
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn gaussian(&mut self, shape: Vec<usize>) -> Tensor {
        Tensor::from_fn(shape, |_| self.normal() as f32)
    }

    pub fn gaussian_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
