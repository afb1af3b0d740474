// SPDX-License-Identifier: MIT OR Apache-2.0

//! Stochastic negative controls and the Monte Carlo check that mean-matched
//! noise reproduces the expected attention output.
//!
//! Two controls are supported. *Noise Δ* replaces an attention update with
//! i.i.d. Gaussian entries carrying the update's scalar mean and population
//! standard deviation. *Noise QKV* keeps the attention mechanism but draws its
//! projections from `N(0, init_std²)`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numeric::{mean_std, CompensatedSum};
use crate::rng::GaussianStream;

/// Default standard deviation of Noise QKV projections.
pub const DEFAULT_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Delta,
    Qkv,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub mode: NoiseMode,
    pub mean: f64,
    pub std: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(mode: NoiseMode, mean: f64, std: f64, seed: u64) -> Result<Self> {
        if !(std >= 0.0) || !mean.is_finite() || !std.is_finite() {
            return Err(Error::Invalid(format!(
                "noise needs finite mean and std ≥ 0, got ({mean}, {std})"
            )));
        }
        Ok(NoiseSpec { mode, mean, std, seed })
    }

    /// A Gaussian matrix with this spec's moments.
    pub fn sample(&self, rows: usize, cols: usize) -> Matrix {
        if self.std == 0.0 {
            return Matrix::filled(rows, cols, self.mean);
        }
        GaussianStream::new(self.seed).matrix(rows, cols, self.mean, self.std)
    }
}

/// Scalar mean and population standard deviation over every entry.
pub fn moment_match(delta_x: &Matrix) -> Result<(f64, f64)> {
    if delta_x.is_empty() {
        return Err(Error::Empty);
    }
    if !delta_x.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(mean_std(delta_x.as_slice()))
}

/// Noise Δ: a moment-matched Gaussian replacement for `delta_x`.
pub fn noise_delta(delta_x: &Matrix, seed: u64) -> Result<Matrix> {
    let (mean, std) = moment_match(delta_x)?;
    let spec = NoiseSpec::new(NoiseMode::Delta, mean, std, seed)?;
    Ok(spec.sample(delta_x.rows(), delta_x.cols()))
}

/// Shifts every entry so the scalar mean becomes `target`.
pub fn match_mean(delta_x: &Matrix, target: f64) -> Result<Matrix> {
    let (mean, _) = moment_match(delta_x)?;
    Ok(delta_x.map(|v| v + (target - mean)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionDims {
    pub hidden: usize,
    pub head_dim: usize,
    pub value_dim: usize,
    pub heads: usize,
}

/// Random projections for one attention layer. `wo` is `None` when the
/// layer's own output projection is kept.
#[derive(Clone, Debug, PartialEq)]
pub struct QkvNoise {
    /// `H × heads·d_k`
    pub wq: Matrix,
    /// `H × heads·d_k`
    pub wk: Matrix,
    /// `H × heads·d_v`
    pub wv: Matrix,
    /// `heads·d_v × H`
    pub wo: Option<Matrix>,
}

/// Noise QKV projections drawn in the order `wq, wk, wv, wo`.
pub fn noise_qkv(dims: AttentionDims, init_std: f64, seed: u64, include_output: bool) -> Result<QkvNoise> {
    let AttentionDims {
        hidden,
        head_dim,
        value_dim,
        heads,
    } = dims;
    if hidden == 0 || head_dim == 0 || value_dim == 0 || heads == 0 {
        return Err(Error::Invalid(format!("attention dims must be positive, got {dims:?}")));
    }
    if !(init_std >= 0.0) || !init_std.is_finite() {
        return Err(Error::Invalid(format!(
            "init_std must be finite and ≥ 0, got {init_std}"
        )));
    }
    let mut g = GaussianStream::new(seed);
    let qk = heads * head_dim;
    let v = heads * value_dim;
    let wq = g.matrix(hidden, qk, 0.0, init_std);
    let wk = g.matrix(hidden, qk, 0.0, init_std);
    let wv = g.matrix(hidden, v, 0.0, init_std);
    let wo = include_output.then(|| g.matrix(v, hidden, 0.0, init_std));
    Ok(QkvNoise { wq, wk, wv, wo })
}

/// Outcome of [`expectation_equivalence_check`]. Vectors are per coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub n_trials: usize,
    pub keys: usize,
    pub dim: usize,
    pub mu_v: f64,
    /// Mean of the softmax-weighted value sums.
    pub mean_scenario1: Vec<f64>,
    pub std_scenario1: Vec<f64>,
    /// Mean of direct Gaussian outputs with mean `mu_v` and the scenario-1
    /// pooled standard deviation.
    pub mean_scenario2: Vec<f64>,
    pub std_scenario2: Vec<f64>,
    /// Empirical `E[a_i]` per key position.
    pub attention_mean: Vec<f64>,
    pub attention_std: Vec<f64>,
    /// Largest `|Σ a_i − 1|` seen in any trial.
    pub max_weight_sum_error: f64,
    pub pass: bool,
}

/// Stream offset separating scenario-2 draws from the per-trial scenario-1
/// streams.
const SCENARIO2_STREAM: u64 = 1 << 40;

/// Monte Carlo comparison of attention outputs against mean-matched noise.
///
/// Trial `n` draws `q ~ N(0, I_d)`, `K ~ N(0, 1)^{N×d}`, `V ~ N(μ_V, 1)^{N×d}`
/// from stream `n` of `seed` and forms `y = Σ_i a_i v_i` with
/// `a = softmax(K q / √d)`. Scenario 2 draws `y ~ N(μ_V, σ_Y²)` directly, with
/// `σ_Y` the pooled population std of the scenario-1 outputs.
///
/// Passes when every coordinate mean of both scenarios lies within
/// `5 σ̂ / √n` of `μ_V`, every `E[a_i]` lies within the same bound of `1/N`,
/// and each trial's weights sum to 1 within 1e-12.
pub fn expectation_equivalence_check(
    n_trials: usize,
    keys: usize,
    dim: usize,
    mu_v: f64,
    seed: u64,
) -> Result<EquivalenceReport> {
    if n_trials < 100 {
        return Err(Error::OutOfRange {
            what: "n_trials",
            value: n_trials,
            range: String::from("[100, ∞)"),
        });
    }
    if keys == 0 || dim == 0 {
        return Err(Error::Invalid(format!("need N ≥ 1 and d ≥ 1, got N={keys}, d={dim}")));
    }
    if !mu_v.is_finite() {
        return Err(Error::NonFinite);
    }

    let scale = 1.0 / libm::sqrt(dim as f64);
    let mut y1 = vec![Vec::with_capacity(n_trials); dim];
    let mut weights = vec![Vec::with_capacity(n_trials); keys];
    let mut max_weight_sum_error = 0.0f64;
    let mut logits = vec![0.0; keys];
    for trial in 0..n_trials {
        let mut g = GaussianStream::with_stream(seed, trial as u64);
        let q: Vec<f64> = (0..dim).map(|_| g.next_standard()).collect();
        let k = g.matrix(keys, dim, 0.0, 1.0);
        let v = g.matrix(keys, dim, mu_v, 1.0);
        for (i, l) in logits.iter_mut().enumerate() {
            *l = crate::matrix::dot(k.row(i), &q) * scale;
        }
        let a = softmax(&logits);
        let total: CompensatedSum = a.iter().copied().collect();
        max_weight_sum_error = max_weight_sum_error.max(libm::fabs(total.value() - 1.0));
        for c in 0..dim {
            let y: CompensatedSum = a.iter().enumerate().map(|(i, &w)| w * v[(i, c)]).collect();
            y1[c].push(y.value());
        }
        for (i, &w) in a.iter().enumerate() {
            weights[i].push(w);
        }
    }

    let all_y1: Vec<f64> = y1.iter().flatten().copied().collect();
    let (_, sigma_y) = mean_std(&all_y1);
    let mut y2 = vec![Vec::with_capacity(n_trials); dim];
    for trial in 0..n_trials {
        let mut g = GaussianStream::with_stream(seed, SCENARIO2_STREAM + trial as u64);
        for col in y2.iter_mut() {
            col.push(g.next_normal(mu_v, sigma_y));
        }
    }

    let stats = |cols: &[Vec<f64>]| -> (Vec<f64>, Vec<f64>) { cols.iter().map(|c| mean_std(c)).unzip() };
    let (mean_scenario1, std_scenario1) = stats(&y1);
    let (mean_scenario2, std_scenario2) = stats(&y2);
    let (attention_mean, attention_std) = stats(&weights);

    let root_n = libm::sqrt(n_trials as f64);
    let within = |means: &[f64], stds: &[f64], target: f64| {
        means
            .iter()
            .zip(stds)
            .all(|(m, s)| libm::fabs(m - target) <= 5.0 * s / root_n)
    };
    let pass = within(&mean_scenario1, &std_scenario1, mu_v)
        && within(&mean_scenario2, &std_scenario2, mu_v)
        && within(&attention_mean, &attention_std, 1.0 / keys as f64)
        && max_weight_sum_error <= 1e-12;

    Ok(EquivalenceReport {
        n_trials,
        keys,
        dim,
        mu_v,
        mean_scenario1,
        std_scenario1,
        mean_scenario2,
        std_scenario2,
        attention_mean,
        attention_std,
        max_weight_sum_error,
        pass,
    })
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| libm::exp(l - max)).collect();
    let total: CompensatedSum = exps.iter().copied().collect();
    exps.iter().map(|e| e / total.value()).collect()
}
