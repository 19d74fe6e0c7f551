//! Seeded random streams. Every stochastic routine takes an explicit seed
//! and derives its generator here so runs are reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::tensor::{Scalar, Tensor};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for a named sub-stream of `seed` (e.g. one per training step).
pub fn substream(seed: u64, label: &str, index: u64) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&d);
    ChaCha8Rng::from_seed(s)
}

/// Source of standard normal image-sized draws. Samplers take this instead
/// of a raw generator so tests can count or script draws.
pub trait NoiseSource {
    fn draw(&mut self, shape: &[usize]) -> Tensor<f32>;
}

/// Gaussian noise from a seeded generator, counting how many tensors were drawn.
pub struct GaussianNoise {
    rng: Rng,
    draws: usize,
}

impl GaussianNoise {
    pub fn new(seed: u64) -> Self {
        Self { rng: seeded(seed), draws: 0 }
    }

    pub fn draws(&self) -> usize {
        self.draws
    }
}

impl NoiseSource for GaussianNoise {
    fn draw(&mut self, shape: &[usize]) -> Tensor<f32> {
        self.draws += 1;
        Tensor::randn(shape, &mut self.rng)
    }
}

/// Uniform integer in `0..n` without modulo bias.
pub fn below<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> usize {
    rng.random_range(0..n)
}

pub fn normal<T: Scalar, R: rand::Rng + ?Sized>(rng: &mut R) -> T {
    T::sample_normal(rng)
}
