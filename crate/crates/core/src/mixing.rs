// SPDX-License-Identifier: MIT OR Apache-2.0

//! Token Mixing Entropy (TME) and Mixing Information Gain (MixIG).
//!
//! Each token's unit direction `x̃_t` is compared with every token (itself
//! included) by cosine similarity mapped to `[0, 1]`:
//!
//! ```text
//! P[t, j] = ((x̃_tᵀ x̃_j + 1) / 2) / Σ_k ((x̃_tᵀ x̃_k + 1) / 2)
//! TME(X)  = −(1/S) Σ_t Σ_j P[t, j] ln P[t, j]       ∈ [0, ln S]
//! MixIG   = TME(X') − TME(X)
//! ```
//!
//! Entropies are in nats.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::{dot, norm2, Matrix};
use crate::numeric::{shannon_entropy, CompensatedSum};

/// Row-stochastic `S×S` matrix of mapped cosine similarities.
#[derive(Clone, Debug, PartialEq)]
pub struct MixingDistribution {
    p: Matrix,
}

impl MixingDistribution {
    pub fn matrix(&self) -> &Matrix {
        &self.p
    }

    pub fn into_matrix(self) -> Matrix {
        self.p
    }

    /// Mean row entropy.
    pub fn entropy(&self) -> f64 {
        let s = self.p.rows();
        let total: CompensatedSum = self
            .p
            .row_iter()
            .map(|row| shannon_entropy(row.iter().copied()))
            .collect();
        total.value() / s as f64
    }
}

fn unit_rows(x: &Matrix) -> Result<Vec<Vec<f64>>> {
    if x.is_empty() {
        return Err(Error::Empty);
    }
    if !x.is_finite() {
        return Err(Error::NonFinite);
    }
    x.row_iter()
        .enumerate()
        .map(|(index, row)| {
            let n = norm2(row);
            if n > 0.0 {
                Ok(row.iter().map(|v| v / n).collect())
            } else {
                Err(Error::ZeroRow { index })
            }
        })
        .collect()
}

pub fn mixing_distribution(x: &Matrix) -> Result<MixingDistribution> {
    let units = unit_rows(x)?;
    let s = units.len();
    let mut p = Matrix::zeros(s, s);
    for (t, ut) in units.iter().enumerate() {
        let row = p.row_mut(t);
        for (j, uj) in units.iter().enumerate() {
            let cos = dot(ut, uj).clamp(-1.0, 1.0);
            row[j] = (cos + 1.0) / 2.0;
        }
        // the self term contributes ≈ 1, so the sum is never zero
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(MixingDistribution { p })
}

pub fn token_mixing_entropy(x: &Matrix) -> Result<f64> {
    Ok(mixing_distribution(x)?.entropy())
}

/// `TME(X') − TME(X)`.
pub fn mixing_information_gain(x: &Matrix, xp: &Matrix) -> Result<f64> {
    x.ensure_same_shape(xp)?;
    Ok(token_mixing_entropy(xp)? - token_mixing_entropy(x)?)
}
