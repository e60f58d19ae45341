//! Seeded, splittable random streams.
//!
//! Every stream is a ChaCha20 keystream whose 256-bit key is derived from its
//! parent's key and a string label. Splitting never consumes parent state, so
//! `rng.split("x")` is the same stream no matter how many draws happened first.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::Tensor;

#[derive(Clone, Debug)]
pub struct Rng {
    key: [u8; 32],
    stream: ChaCha20Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"actiondiff-rng-root");
        h.update(seed.to_le_bytes());
        Rng::from_key(h.finalize().into())
    }

    fn from_key(key: [u8; 32]) -> Self {
        Rng { key, stream: ChaCha20Rng::from_seed(key) }
    }

    /// Independent child stream named by `label`.
    pub fn split(&self, label: &str) -> Rng {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        Rng::from_key(h.finalize().into())
    }

    pub fn split_index(&self, label: &str, index: u64) -> Rng {
        self.split(&format!("{label}#{index}"))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.stream.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.stream.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        self.stream.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.stream)
    }

    /// Draw from Beta(a, b); `a, b > 0`.
    pub fn beta(&mut self, a: f64, b: f64) -> f64 {
        Beta::new(a, b).expect("beta parameters must be positive").sample(&mut self.stream)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.stream);
    }

    pub fn normal_tensor(&mut self, shape: &[usize], std: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = self.normal() * std;
        }
        t.rounded()
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = self.uniform_range(lo, hi);
        }
        t.rounded()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_ignores_parent_consumption() {
        let a = Rng::new(7);
        let mut b = Rng::new(7);
        b.next_u64();
        b.normal();
        assert_eq!(a.split("x").next_u64(), b.split("x").next_u64());
        assert_ne!(a.split("x").next_u64(), a.split("y").next_u64());
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(3);
        let mut b = Rng::new(3);
        for _ in 0..10 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }
}
