// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reproducible Gaussian sampling.
//!
//! The bit stream is ChaCha8 (`rand_chacha::ChaCha8Rng`), keyed from a `u64`
//! seed with `SeedableRng::seed_from_u64` and optionally placed on a numbered
//! stream, so independent trials can draw from disjoint, seek-free sequences.
//! Standard normals come from the Box–Muller transform applied to consecutive
//! pairs of 53-bit uniforms:
//!
//! ```text
//! u1 = ((next_u64() >> 11) + 1) · 2⁻⁵³        ∈ (0, 1]
//! u2 =  (next_u64() >> 11)      · 2⁻⁵³        ∈ [0, 1)
//! z0 = sqrt(−2 ln u1) · cos(2π u2)
//! z1 = sqrt(−2 ln u1) · sin(2π u2)
//! ```
//!
//! `z0` is returned first, then `z1`. Any implementation following these steps
//! reproduces the same samples.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::matrix::Matrix;

const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;

#[derive(Clone, Debug)]
pub struct GaussianStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Stream `stream` of the generator keyed by `seed`.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        GaussianStream { rng, spare: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * TWO_POW_M53
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn next_range(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo <= hi);
        let span = (hi - lo) as u64 + 1;
        lo + (self.rng.next_u64() % span) as usize
    }

    pub fn next_standard(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = ((self.rng.next_u64() >> 11) + 1) as f64 * TWO_POW_M53;
        let u2 = (self.rng.next_u64() >> 11) as f64 * TWO_POW_M53;
        let radius = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        self.spare = Some(radius * libm::sin(theta));
        radius * libm::cos(theta)
    }

    pub fn next_normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.next_standard()
    }

    /// Matrix of i.i.d. `N(mean, std²)` entries, filled row by row.
    pub fn matrix(&mut self, rows: usize, cols: usize, mean: f64, std: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.next_normal(mean, std))
    }
}
