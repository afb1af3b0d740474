// SPDX-License-Identifier: MIT OR Apache-2.0

//! Thin singular value decomposition by one-sided (Hestenes) Jacobi rotations.
//!
//! Columns of the working matrix are rotated pairwise until every pair is
//! orthogonal to within `m·ε` relative to the product of their norms. The
//! column norms are then the singular values and the normalised columns the
//! left singular vectors; the accumulated rotations form `V`. One-sided Jacobi
//! computes small singular values to high relative accuracy, which matters
//! here because numeric rank decides which directions count as support.
//!
//! Wide inputs (`S < H`) are decomposed through their transpose.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

/// Singular values at or below `RANK_TOL · σ₁` do not count towards the
/// numeric rank.
pub const RANK_TOL: f64 = 1e-10;

const MAX_SWEEPS: usize = 64;

/// `X = U · diag(σ) · Vᵀ` with `U: S×Q`, `V: H×Q`, `Q = min(S, H)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdFactors {
    pub u: Matrix,
    /// Non-increasing, non-negative.
    pub sigma: Vec<f64>,
    pub v: Matrix,
    /// Number of `σᵢ > rank_tol · σ₁`.
    pub numeric_rank: usize,
}

impl SvdFactors {
    pub fn q(&self) -> usize {
        self.sigma.len()
    }

    /// Rebuilds `Σ_{i<k} σᵢ uᵢ vᵢᵀ`; `k = Q` gives the full reconstruction.
    pub fn partial_sum(&self, k: usize) -> Matrix {
        let k = k.min(self.q());
        let (s, h) = (self.u.rows(), self.v.rows());
        let mut out = Matrix::zeros(s, h);
        for i in 0..s {
            let row = out.row_mut(i);
            for t in 0..k {
                let coeff = self.u[(i, t)] * self.sigma[t];
                if coeff == 0.0 {
                    continue;
                }
                for (j, o) in row.iter_mut().enumerate() {
                    *o += coeff * self.v[(j, t)];
                }
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Matrix {
        self.partial_sum(self.q())
    }

    /// First `r` left singular vectors as an `S×r` matrix.
    pub fn leading_u(&self, r: usize) -> Matrix {
        self.u.col_range(0, r)
    }

    /// First `r` right singular vectors as an `H×r` matrix.
    pub fn leading_v(&self, r: usize) -> Matrix {
        self.v.col_range(0, r)
    }
}

/// SVD with the default [`RANK_TOL`].
pub fn svd(x: &Matrix) -> Result<SvdFactors> {
    svd_with_tol(x, RANK_TOL)
}

pub fn svd_with_tol(x: &Matrix, rank_tol: f64) -> Result<SvdFactors> {
    if x.is_empty() {
        return Err(Error::Empty);
    }
    if !x.is_finite() {
        return Err(Error::NonFinite);
    }
    let (s, h) = x.shape();
    let (u, sigma, v) = if s >= h {
        jacobi_tall(x)?
    } else {
        let (u_t, sigma, v_t) = jacobi_tall(&x.transpose())?;
        (v_t, sigma, u_t)
    };
    let numeric_rank = match sigma.first() {
        Some(&s1) if s1 > 0.0 => sigma.iter().take_while(|&&si| si > rank_tol * s1).count(),
        _ => 0,
    };
    Ok(SvdFactors {
        u,
        sigma,
        v,
        numeric_rank,
    })
}

/// Decomposes an `m×n` matrix with `m ≥ n`; returns `(U: m×n, σ, V: n×n)`.
fn jacobi_tall(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (m, n) = a.shape();
    debug_assert!(m >= n);
    // Column-major working copies keep the rotation loops contiguous.
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = alloc::vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let tol = f64::EPSILON * m as f64;

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if gamma == 0.0 || libm::fabs(gamma) <= tol * libm::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (libm::fabs(zeta) + libm::hypot(1.0, zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                let (wp, wq) = pair_mut(&mut w, p, q);
                rotate(wp, wq, c, s);
                let (vp, vq) = pair_mut(&mut v, p, q);
                rotate(vp, vq, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::NoConvergence { sweeps: MAX_SWEEPS });
    }

    let norms: Vec<f64> = w.iter().map(|col| libm::sqrt(dot(col, col))).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let sigma_max = norms[order[0]];
    // Columns this small carry no usable direction; replace them with an
    // orthonormal completion instead of normalising rounding noise.
    let floor = sigma_max * f64::EPSILON * 1e-3;
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let nrm = norms[j];
        if nrm > floor && nrm > 0.0 {
            u_cols.push(w[j].iter().map(|x| x / nrm).collect());
        } else {
            u_cols.push(Vec::new());
            missing.push(slot);
        }
    }
    for slot in missing {
        let basis: Vec<&[f64]> = u_cols.iter().filter(|c| !c.is_empty()).map(|c| c.as_slice()).collect();
        let col = orthonormal_completion(&basis, m);
        u_cols[slot] = col;
    }

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let u = Matrix::from_fn(m, n, |i, t| u_cols[t][i]);
    let v_mat = Matrix::from_fn(n, n, |i, t| v[order[t]][i]);
    Ok((u, sigma, v_mat))
}

fn pair_mut(cols: &mut [Vec<f64>], p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(p < q);
    let (lo, hi) = cols.split_at_mut(q);
    (&mut lo[p], &mut hi[0])
}

#[inline]
fn rotate(xp: &mut [f64], xq: &mut [f64], c: f64, s: f64) {
    for (a, b) in xp.iter_mut().zip(xq.iter_mut()) {
        let (pa, qb) = (*a, *b);
        *a = c * pa - s * qb;
        *b = s * pa + c * qb;
    }
}

/// A unit vector orthogonal to every column in `basis` (which must be
/// orthonormal and fewer than `m`). Picks the standard basis vector with the
/// largest residual after two Gram–Schmidt passes.
fn orthonormal_completion(basis: &[&[f64]], m: usize) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for k in 0..m {
        let mut e = alloc::vec![0.0; m];
        e[k] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let proj = dot(&e, b);
                for (ei, bi) in e.iter_mut().zip(b.iter()) {
                    *ei -= proj * bi;
                }
            }
        }
        let nrm = libm::sqrt(dot(&e, &e));
        if best.as_ref().map_or(true, |(bn, _)| nrm > *bn) {
            best = Some((nrm, e));
        }
    }
    let (nrm, mut e) = best.expect("m > 0");
    for x in &mut e {
        *x /= nrm;
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::GaussianStream;

    fn orthonormality_defect(m: &Matrix) -> f64 {
        let g = m.transpose_matmul(m);
        g.max_abs_diff(&Matrix::identity(g.rows()))
    }

    fn check_contract(x: &Matrix) -> SvdFactors {
        let f = svd(x).unwrap();
        let q = x.rows().min(x.cols());
        assert_eq!(f.sigma.len(), q);
        assert_eq!(f.u.shape(), (x.rows(), q));
        assert_eq!(f.v.shape(), (x.cols(), q));
        assert!(orthonormality_defect(&f.u) <= 1e-8, "U not orthonormal");
        assert!(orthonormality_defect(&f.v) <= 1e-8, "V not orthonormal");
        assert!(f.sigma.windows(2).all(|w| w[0] >= w[1]));
        assert!(f.sigma.iter().all(|&s| s >= 0.0));
        let err = x.sub(&f.reconstruct()).frobenius_norm();
        assert!(err <= 1e-8 * x.frobenius_norm().max(1.0), "reconstruction {err}");
        f
    }

    #[test]
    fn diagonal() {
        let f = check_contract(&Matrix::diag(&[4.0, 3.0]));
        assert_eq!(f.sigma, [4.0, 3.0]);
        assert_eq!(f.numeric_rank, 2);
    }

    #[test]
    fn unsorted_diagonal_is_sorted() {
        let f = check_contract(&Matrix::diag(&[1.0, 5.0, 3.0]));
        assert_eq!(f.sigma, [5.0, 3.0, 1.0]);
    }

    #[test]
    fn rank_one_outer_product() {
        let u = [0.6, 0.8, 0.0];
        let v = [0.0, 1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt(), 0.0];
        let x = Matrix::from_fn(3, 4, |i, j| u[i] * v[j]);
        let f = check_contract(&x);
        assert!((f.sigma[0] - 1.0).abs() < 1e-14);
        assert!(f.sigma[1] < 1e-14);
        assert_eq!(f.numeric_rank, 1);
    }

    #[test]
    fn random_shapes_reconstruct() {
        let mut g = GaussianStream::new(7);
        for &(s, h) in &[(8, 5), (5, 8), (1, 6), (6, 1), (17, 17), (40, 3)] {
            let x = Matrix::from_fn(s, h, |_, _| g.next_standard());
            check_contract(&x);
        }
    }

    #[test]
    fn zero_matrix_has_rank_zero() {
        let f = check_contract(&Matrix::zeros(3, 2));
        assert_eq!(f.numeric_rank, 0);
        assert!(f.sigma.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn rank_deficient_completion_stays_orthonormal() {
        let mut g = GaussianStream::new(11);
        let a = Matrix::from_fn(12, 3, |_, _| g.next_standard());
        let b = Matrix::from_fn(3, 9, |_, _| g.next_standard());
        let f = check_contract(&a.matmul(&b));
        assert_eq!(f.numeric_rank, 3);
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut x = Matrix::zeros(2, 2);
        x[(0, 1)] = f64::NAN;
        assert_eq!(svd(&x), Err(Error::NonFinite));
    }
}
