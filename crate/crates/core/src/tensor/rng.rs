//! Seeded, splittable random streams.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A ChaCha8 stream addressed by `(seed, stream, word position)`.
///
/// Streams with the same seed but different ids are independent, so workers
/// and separate consumers (batching, latent noise, discriminator) never
/// perturb each other's draws.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    /// A fresh stream with the same seed and a different id.
    pub fn split(&self, stream: u64) -> Self {
        Self::new(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn set_counter(&mut self, pos: u128) {
        self.rng.set_word_pos(pos);
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform on the open interval `(0, 1)`.
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u = self.rng.gen::<f64>();
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn uniforms_open(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.uniform_open()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_address_same_draws() {
        let mut a = RngStream::new(7, 3);
        let mut b = RngStream::new(7, 3);
        for _ in 0..100 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
        assert_eq!(a.counter(), b.counter());
    }

    #[test]
    fn streams_differ() {
        let mut a = RngStream::new(7, 0);
        let mut b = a.split(1);
        let xa: Vec<f64> = (0..8).map(|_| a.uniform()).collect();
        let xb: Vec<f64> = (0..8).map(|_| b.uniform()).collect();
        assert_ne!(xa, xb);
    }

    #[test]
    fn counter_rewinds() {
        let mut a = RngStream::new(1, 0);
        let pos = a.counter();
        let first = a.uniform();
        a.set_counter(pos);
        assert_eq!(first, a.uniform());
    }
}
