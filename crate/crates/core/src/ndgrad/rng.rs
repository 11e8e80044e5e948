//! Seed-derived, splittable random streams.
//!
//! Every consumer of randomness (dataset generation, style noise, patch
//! shuffles, stream ordering) takes a named child of the experiment seed.
//! Children are derived from the parent key alone, so the order in which
//! streams are split or drawn from never changes another stream's values.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Clone, Debug)]
pub struct RngStream {
    key: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::from_key(splitmix64(seed))
    }

    fn from_key(key: u64) -> Self {
        RngStream {
            key,
            rng: ChaCha8Rng::seed_from_u64(key),
        }
    }

    /// Independent child stream named `name`. Deterministic in (parent seed, name).
    pub fn split(&self, name: &str) -> RngStream {
        Self::from_key(splitmix64(self.key ^ fnv1a(name.as_bytes()).rotate_left(17)))
    }

    /// Child stream indexed by an integer, for per-batch or per-trial streams.
    pub fn split_index(&self, index: u64) -> RngStream {
        Self::from_key(splitmix64(self.key.wrapping_add(splitmix64(index ^ GOLDEN_GAMMA))))
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn gaussian(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn gaussian_tensor(&mut self, shape: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = self.rng.sample(StandardNormal);
        }
        t
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in `0..n`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniformly random permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut self.rng);
        p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_path_same_values() {
        let a = RngStream::new(7).split("style").gaussian_tensor(&[16]);
        let b = RngStream::new(7).split("style").gaussian_tensor(&[16]);
        assert_eq!(a, b);
    }

    #[test]
    fn sibling_streams_differ() {
        let root = RngStream::new(7);
        let a = root.split("style").gaussian_tensor(&[16]);
        let b = root.split("shuffle").gaussian_tensor(&[16]);
        assert_ne!(a, b);
        let c = root.split_index(0).gaussian_tensor(&[16]);
        let d = root.split_index(1).gaussian_tensor(&[16]);
        assert_ne!(c, d);
    }

    #[test]
    fn splitting_does_not_advance_parent() {
        let mut root = RngStream::new(3);
        let _ = root.split("x");
        let v1 = root.gaussian();
        let mut fresh = RngStream::new(3);
        assert_eq!(v1, fresh.gaussian());
    }

    #[test]
    fn gaussian_moments() {
        let mut s = RngStream::new(11).split("moments");
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| s.gaussian()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        let sd = var.sqrt();
        assert!((0.99..=1.01).contains(&sd), "std {sd}");
    }

    #[test]
    fn permutation_of_one() {
        assert_eq!(RngStream::new(0).permutation(1), vec![0]);
    }

    #[test]
    fn permutation_is_bijection() {
        let mut p = RngStream::new(5).permutation(50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }
}
