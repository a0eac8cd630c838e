//! Deterministic random numbers.
//!
//! The generator is SplitMix64: output i is a fixed 64-bit mix of
//! `seed + (i+1) * 0x9E3779B97F4A7C15`, so a (seed, counter) pair fully
//! determines every draw on every platform. Gaussian variates come from the
//! Box-Muller transform evaluated with `libm`, which keeps the f32 results
//! bit-identical across platforms as well.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const GOLDEN: u64 = 0x9E3779B97F4A7C15;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dist {
    Normal,
    Uniform,
}

impl Rng {
    pub fn new(seed: u64) -> Rng {
        Rng { state: seed }
    }

    /// Raw counter state, for checkpointing.
    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn from_state(state: u64) -> Rng {
        Rng { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53-bit resolution, rounded to f32.
    pub fn uniform(&mut self) -> f32 {
        ((self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)) as f32
    }

    /// Standard normal via Box-Muller (one variate per call; the cosine leg).
    pub fn normal(&mut self) -> f32 {
        // u1 in (0,1] so the log stays finite.
        let u1 = ((self.next_u64() >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let r = libm::sqrt(-2.0 * libm::log(u1));
        (r * libm::cos(2.0 * core::f64::consts::PI * u2)) as f32
    }

    pub fn uniform_range(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    pub fn fill(&mut self, shape: &[usize], dist: Dist) -> Result<Tensor> {
        if shape.is_empty() {
            return Err(Error::invalid("rng fill with empty shape"));
        }
        let n: usize = shape.iter().product();
        let data = match dist {
            Dist::Normal => (0..n).map(|_| self.normal()).collect(),
            Dist::Uniform => (0..n).map(|_| self.uniform()).collect(),
        };
        Tensor::from_vec(shape, data)
    }
}

/// Fresh stream per (shape, seed, dist); deterministic.
pub fn rng_fill(shape: &[usize], seed: u64, dist: Dist) -> Result<Tensor> {
    Rng::new(seed).fill(shape, dist)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_tensor() {
        let a = rng_fill(&[4, 7], 42, Dist::Normal).unwrap();
        let b = rng_fill(&[4, 7], 42, Dist::Normal).unwrap();
        assert_eq!(a, b);
        let c = rng_fill(&[4, 7], 43, Dist::Normal).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn normal_moments() {
        let n = 100_000;
        let t = rng_fill(&[n], 7, Dist::Normal).unwrap();
        let mean = t.sum() / n as f32;
        // CLT bound: 5 sigma of the sample mean is 5/sqrt(n) ~ 0.0158.
        let bound = 5.0 / (n as f32).sqrt();
        assert!(mean.abs() < bound.max(0.02), "mean {mean}");
        let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
        // Var of sample variance of a normal is 2/n; 5 sigma bound.
        assert!((var - 1.0).abs() < 5.0 * (2.0 / n as f32).sqrt(), "var {var}");
    }

    #[test]
    fn uniform_range_half_open() {
        let t = rng_fill(&[100_000], 3, Dist::Uniform).unwrap();
        let mn = t.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let mx = t.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert!(mn >= 0.0);
        assert!(mx < 1.0);
    }

    #[test]
    fn empty_shape_rejected() {
        assert!(rng_fill(&[], 0, Dist::Uniform).is_err());
    }
}
