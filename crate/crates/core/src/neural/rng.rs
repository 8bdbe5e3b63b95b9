//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator (`rand_chacha::ChaCha8Rng`) seeded with
//! `seed_from_u64(seed)` and switched to a numbered ChaCha stream, so one
//! top-level seed fans out into independent, individually reproducible
//! sub-streams (`Rng::derive(seed, stream)`). Uniform doubles use rand's
//! standard 53-bit conversion. Normal draws use the Box-Muller transform:
//! for `u1 = 1 - U`, `u2 = U`,
//!
//! ```text
//! z0 = sqrt(-2 ln u1) * cos(2 pi u2)
//! z1 = sqrt(-2 ln u1) * sin(2 pi u2)
//! ```
//!
//! `z0` is returned first and `z1` is cached for the next call.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Matrix;
use crate::error::{Error, Result};

/// Named sub-streams derived from one run seed.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const TASKS: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const FEWSHOT: u64 = 4;
    pub const SYNTH: u64 = 5;
    pub const CLASSIFIER: u64 = 6;
    pub const DATA: u64 = 7;
}

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::derive(seed, 0)
    }

    /// Stream `stream` of the generator family keyed by `seed`.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "empty range");
        self.inner.gen_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct elements of `items`, in sampled order.
    pub fn choose_distinct<T: Clone>(&mut self, items: &[T], k: usize) -> Vec<T> {
        assert!(k <= items.len(), "cannot choose {k} of {}", items.len());
        let mut idx: Vec<usize> = (0..items.len()).collect();
        for i in 0..k {
            let j = i + self.below(items.len() - i);
            idx.swap(i, j);
        }
        idx[..k].iter().map(|&i| items[i].clone()).collect()
    }
}

/// `rows x cols` matrix of i.i.d. standard normal draws.
pub fn gaussian_sample(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    Matrix::from_vec(rows, cols, data).expect("length matches shape")
}

/// Inverted-dropout mask: each entry is `0` with probability `rate`, else
/// `1 / (1 - rate)`. A zero rate yields all ones and draws nothing.
pub fn dropout_mask(rng: &mut Rng, rows: usize, cols: usize, rate: f64) -> Result<Matrix> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    if rate == 0.0 {
        return Ok(Matrix::filled(rows, cols, 1.0));
    }
    let keep = 1.0 / (1.0 - rate);
    let data = (0..rows * cols)
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a = gaussian_sample(&mut Rng::new(11), 4, 5);
        let b = gaussian_sample(&mut Rng::new(11), 4, 5);
        assert_eq!(a, b);
        let c = gaussian_sample(&mut Rng::new(12), 4, 5);
        assert_ne!(a, c);
    }

    #[test]
    fn derived_streams_differ() {
        let mut a = Rng::derive(5, streams::TASKS);
        let mut b = Rng::derive(5, streams::NOISE);
        let xs: Vec<f64> = (0..8).map(|_| a.uniform()).collect();
        let ys: Vec<f64> = (0..8).map(|_| b.uniform()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = Rng::new(2024);
        let n = 1_000_000;
        let m = gaussian_sample(&mut rng, 1, n);
        let mean = m.mean();
        let var = m.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!(var > 0.99 && var < 1.01, "var {var}");
    }

    #[test]
    fn dropout_rate_zero_is_ones() {
        let m = dropout_mask(&mut Rng::new(1), 3, 4, 0.0).unwrap();
        assert!(m.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dropout_zero_fraction_and_scaling() {
        let mut rng = Rng::new(9);
        let m = dropout_mask(&mut rng, 1000, 1000, 0.3).unwrap();
        let zeros = m.as_slice().iter().filter(|&&v| v == 0.0).count() as f64 / 1e6;
        assert!(zeros > 0.295 && zeros < 0.305, "zero fraction {zeros}");
        let keep = 1.0 / 0.7;
        assert!(m.as_slice().iter().all(|&v| v == 0.0 || v == keep));
        // Inverted scaling keeps a constant input's mean.
        let input = 2.5;
        let mean = m.as_slice().iter().map(|v| v * input).sum::<f64>() / 1e6;
        assert!((mean - input).abs() / input < 0.01, "mean {mean}");
    }

    #[test]
    fn dropout_rejects_bad_rate() {
        assert!(dropout_mask(&mut Rng::new(1), 2, 2, 1.0).is_err());
        assert!(dropout_mask(&mut Rng::new(1), 2, 2, -0.1).is_err());
    }

    #[test]
    fn choose_distinct_is_distinct() {
        let mut rng = Rng::new(3);
        let items: Vec<usize> = (0..20).collect();
        let mut picked = rng.choose_distinct(&items, 20);
        picked.sort_unstable();
        assert_eq!(picked, items);
    }
}
