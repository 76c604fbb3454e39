use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// Seeded parameter initializer. Draws are consumed in call order, so a
/// model built in a fixed order is a pure function of the seed.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn fan_in_uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| self.rng.gen_range(-bound..bound)).with_grad()
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("std is finite and positive");
        Tensor::from_fn(shape, |_| dist.sample(&mut self.rng)).with_grad()
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Tensor {
        Tensor::zeros(shape).with_grad()
    }

    pub fn ones(&mut self, shape: &[usize]) -> Tensor {
        Tensor::ones(shape).with_grad()
    }
}
