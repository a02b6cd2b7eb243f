//! The single reproducible noise source.
//!
//! Every random draw in the crate comes from a [`NoiseRng`]: a ChaCha8 stream
//! (`rand_chacha`) seeded with `seed_from_u64`, with standard normals produced by
//! the Box–Muller transform on 53-bit uniforms. Both halves of each Box–Muller
//! pair are used, in order. Derived streams are obtained with [`NoiseRng::fork`]
//! (seeded from the parent's next `u64`) or [`NoiseRng::indexed`] (same seed,
//! ChaCha stream id set to the index).

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct NoiseRng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl NoiseRng {
    pub fn new(seed: u64) -> Self {
        NoiseRng {
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Stream `index` of `seed`; independent of every other index.
    pub fn indexed(seed: u64, index: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(index);
        NoiseRng { inner, spare: None }
    }

    /// A child stream seeded from this stream's next word.
    pub fn fork(&mut self) -> Self {
        NoiseRng::new(self.inner.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n` (n > 0).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // Lemire's multiply-shift; bias is below 2^-32 for the sizes used here.
        (((self.inner.next_u64() >> 32) * n as u64) >> 32) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - u lies in (0, 1], keeping the logarithm finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal_tensor<F: Scalar>(&mut self, shape: &[usize]) -> Tensor<F> {
        Tensor::from_fn(shape, |_| F::of(self.normal()))
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
