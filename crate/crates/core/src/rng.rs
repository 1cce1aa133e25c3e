use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Array;

/// Explicit, seedable random stream (ChaCha8, counter-based).
#[derive(Debug, Clone)]
pub struct RngState {
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        loop {
            let u: f64 = self.inner.random();
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform_array(&mut self, shape: &[usize]) -> Array {
        Array::from_shape_fn(shape.to_vec(), |_| self.uniform())
    }

    pub fn normal_array(&mut self, shape: &[usize]) -> Array {
        Array::from_shape_fn(shape.to_vec(), |_| self.normal())
    }

    /// A new independent stream; advances `self`.
    pub fn fork(&mut self) -> RngState {
        RngState { inner: ChaCha8Rng::seed_from_u64(self.inner.random()) }
    }

    /// `n` independent streams, e.g. one per Markov chain.
    pub fn split(&mut self, n: usize) -> Vec<RngState> {
        (0..n).map(|_| self.fork()).collect()
    }
}
