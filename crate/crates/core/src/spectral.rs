// SPDX-License-Identifier: MIT OR Apache-2.0

//! Innovation metrics on the SVD parameterisation of a representation.
//!
//! A representation `X` is summarised by its effective rank (spectrum) and by
//! the orthogonal projectors onto its column and row spaces (support). An
//! update `X → X'` is then scored by
//!
//! ```text
//! ΔS  = |eRank(X') − eRank(X)| / min(S, H)
//! ΔD  = ( ‖(I − P_C) X'‖_F + ‖X' (I − P_R)‖_F ) / (2 ‖X'‖_F)
//! RID = ΔS + ΔD                                     ∈ [0, 2]
//! ```
//!
//! `P_C = U_r U_rᵀ` and `P_R = V_r V_rᵀ` use only the `r` singular vectors
//! above the numeric-rank threshold [`RANK_TOL`](crate::svd::RANK_TOL);
//! projecting onto all `Q` columns would make `P_C ≈ I` and hide support
//! innovation entirely.
//!
//! `ΔD` is not symmetric in its arguments.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numeric::{shannon_entropy, CompensatedSum};
use crate::svd::{svd, SvdFactors};
use crate::trace::LayerTrace;

/// `‖X‖_F`.
pub fn frobenius_norm(x: &Matrix) -> f64 {
    x.frobenius_norm()
}

/// `exp(H(p))` with `pᵢ = σᵢ / Σσ`, clamped to its mathematical range
/// `[1, len]` to absorb rounding.
pub fn effective_rank_of_spectrum(sigma: &[f64]) -> Result<f64> {
    let total = compensated(sigma.iter().copied());
    if !(total > 0.0) {
        return Err(Error::ZeroMatrix);
    }
    let entropy = shannon_entropy(sigma.iter().map(|s| s / total));
    Ok(libm::exp(entropy).clamp(1.0, sigma.len() as f64))
}

pub fn effective_rank(x: &Matrix) -> Result<f64> {
    effective_rank_of_spectrum(&svd(x)?.sigma)
}

/// Best rank-`k` approximation `Σ_{i≤k} σᵢ uᵢ vᵢᵀ`.
pub fn truncate_rank_k(x: &Matrix, k: usize) -> Result<Matrix> {
    let q = x.rows().min(x.cols());
    if k == 0 || k > q {
        return Err(Error::OutOfRange {
            what: "k",
            value: k,
            range: alloc::format!("[1, {q}]"),
        });
    }
    Ok(svd(x)?.partial_sum(k))
}

/// `sqrt(Σ_{i>k} σᵢ²)`, the Frobenius error of the rank-`k` truncation.
pub fn tail_energy(sigma: &[f64], k: usize) -> f64 {
    libm::sqrt(compensated(sigma.iter().skip(k).map(|s| s * s)))
}

/// Innovation of `X'` relative to `X`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnovationReport {
    pub erank_x: f64,
    pub erank_xp: f64,
    /// Spectrum change ΔS ∈ [0, 1].
    pub delta_s: f64,
    /// Support innovation ΔD ∈ [0, 1].
    pub delta_d: f64,
    /// `delta_s + delta_d` ∈ [0, 2].
    pub rid: f64,
}

/// The spectrum and support of a reference matrix `X`, kept so several
/// updates can be scored against it without repeating its SVD.
#[derive(Clone, Debug)]
pub struct Reference {
    factors: SvdFactors,
    erank: f64,
    basis_u: Matrix,
    basis_v: Matrix,
}

impl Reference {
    pub fn new(x: &Matrix) -> Result<Self> {
        let factors = svd(x)?;
        let erank = effective_rank_of_spectrum(&factors.sigma)?;
        let r = factors.numeric_rank;
        let basis_u = factors.leading_u(r);
        let basis_v = factors.leading_v(r);
        Ok(Reference {
            factors,
            erank,
            basis_u,
            basis_v,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.factors.u.rows(), self.factors.v.rows())
    }

    pub fn factors(&self) -> &SvdFactors {
        &self.factors
    }

    pub fn effective_rank(&self) -> f64 {
        self.erank
    }

    pub fn numeric_rank(&self) -> usize {
        self.factors.numeric_rank
    }

    fn check_shape(&self, xp: &Matrix) -> Result<()> {
        if xp.shape() != self.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                found: xp.shape(),
            });
        }
        Ok(())
    }

    /// ΔS against `X'` whose effective rank is already known.
    fn spectrum_change_from(&self, erank_xp: f64) -> f64 {
        let (s, h) = self.shape();
        let q = s.min(h) as f64;
        (libm::fabs(erank_xp - self.erank) / q).clamp(0.0, 1.0)
    }

    pub fn spectrum_change(&self, xp: &Matrix) -> Result<f64> {
        self.check_shape(xp)?;
        Ok(self.spectrum_change_from(effective_rank(xp)?))
    }

    pub fn support_innovation(&self, xp: &Matrix) -> Result<f64> {
        self.check_shape(xp)?;
        if !xp.is_finite() {
            return Err(Error::NonFinite);
        }
        let norm = xp.frobenius_norm();
        if !(norm > 0.0) {
            return Err(Error::ZeroMatrix);
        }
        // (I − U Uᵀ) X'  and  X' (I − V Vᵀ), each bounded by ‖X'‖ because
        // I − P is non-expansive.
        let col_residual = xp
            .sub(&self.basis_u.matmul(&self.basis_u.transpose_matmul(xp)))
            .frobenius_norm()
            .min(norm);
        let row_residual = xp
            .sub(&xp.matmul(&self.basis_v).matmul_transpose(&self.basis_v))
            .frobenius_norm()
            .min(norm);
        Ok(((col_residual + row_residual) / (2.0 * norm)).clamp(0.0, 1.0))
    }

    pub fn rid(&self, xp: &Matrix) -> Result<InnovationReport> {
        self.check_shape(xp)?;
        let erank_xp = effective_rank(xp)?;
        let delta_s = self.spectrum_change_from(erank_xp);
        let delta_d = self.support_innovation(xp)?;
        Ok(InnovationReport {
            erank_x: self.erank,
            erank_xp,
            delta_s,
            delta_d,
            rid: delta_s + delta_d,
        })
    }
}

/// ΔS(X | X').
pub fn spectrum_change(x: &Matrix, xp: &Matrix) -> Result<f64> {
    x.ensure_same_shape(xp)?;
    let q = x.rows().min(x.cols()) as f64;
    let change = libm::fabs(effective_rank(xp)? - effective_rank(x)?) / q;
    Ok(change.clamp(0.0, 1.0))
}

/// ΔD(X | X').
pub fn support_innovation(x: &Matrix, xp: &Matrix) -> Result<f64> {
    x.ensure_same_shape(xp)?;
    Reference::new(x)?.support_innovation(xp)
}

/// RID(X | X') with both of its components.
pub fn rid(x: &Matrix, xp: &Matrix) -> Result<InnovationReport> {
    x.ensure_same_shape(xp)?;
    Reference::new(x)?.rid(xp)
}

/// Per-layer discrepancy between two traces of the same input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonCalibration {
    pub per_layer: Vec<f64>,
    pub mean: f64,
}

/// `ε_l = RID(x_in^{rope,l} | x_in^{no-rope,l})` for every layer, plus the
/// mean over layers.
///
/// `rope` must have rotary embeddings enabled and `no_rope` disabled.
pub fn calibrate_epsilon_rope(rope: &LayerTrace, no_rope: &LayerTrace) -> Result<EpsilonCalibration> {
    if !rope.rope_enabled || no_rope.rope_enabled {
        return Err(Error::Invalid(alloc::format!(
            "expected rope flags (true, false), got ({}, {})",
            rope.rope_enabled,
            no_rope.rope_enabled
        )));
    }
    input_discrepancy(rope, no_rope)
}

/// The layer-input RID profile between any two equally shaped traces, without
/// checking how they were produced.
pub fn input_discrepancy(a: &LayerTrace, b: &LayerTrace) -> Result<EpsilonCalibration> {
    if a.num_layers() != b.num_layers() {
        return Err(Error::Trace(alloc::format!(
            "layer counts differ: {} vs {}",
            a.num_layers(),
            b.num_layers()
        )));
    }
    if a.num_layers() == 0 {
        return Err(Error::Trace(alloc::string::String::from("trace has no layers")));
    }
    let per_layer = a
        .layers
        .iter()
        .zip(&b.layers)
        .map(|(la, lb)| rid(&la.x_in, &lb.x_in).map(|r| r.rid))
        .collect::<Result<Vec<_>>>()?;
    let mean = compensated(per_layer.iter().copied()) / per_layer.len() as f64;
    Ok(EpsilonCalibration { per_layer, mean })
}

fn compensated(values: impl Iterator<Item = f64>) -> f64 {
    values.collect::<CompensatedSum>().value()
}
