//! One-sided Jacobi SVD.
//!
//! The input is reduced to the tall orientation (rows >= cols); its columns
//! are rotated pairwise until mutually orthogonal. Column norms are the
//! singular values, the normalized columns the left vectors, and the
//! accumulated rotations the right vectors.

use super::{dot, LinalgError, Matrix, Result};
use crate::scalar::Scalar;

/// Sweep cap for the Jacobi iteration.
pub const MAX_SWEEPS: usize = 60;

/// Top-k singular triplets of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult<T> {
    /// m x k, orthonormal columns.
    pub u: Matrix<T>,
    /// Non-increasing, non-negative, length k.
    pub singular_values: Vec<T>,
    /// k x n, orthonormal rows.
    pub vt: Matrix<T>,
}

impl<T: Scalar> SvdResult<T> {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `u · diag(σ) · vt`.
    pub fn reconstruct(&self) -> Matrix<T> {
        self.u
            .scale_columns(&self.singular_values)
            .matmul(&self.vt)
            .expect("svd factors are conformable")
    }

    /// Balanced factor split `A = u·diag(√σ)`, `B = diag(√σ)·vt`.
    pub fn balanced_factors(&self) -> (Matrix<T>, Matrix<T>) {
        let root: Vec<T> = self.singular_values.iter().map(|s| s.sqrt()).collect();
        (self.u.scale_columns(&root), self.vt.scale_rows(&root))
    }
}

/// Best rank-`k` approximation factors of `m` (Eckart–Young).
pub fn truncated_svd<T: Scalar>(m: &Matrix<T>, k: usize) -> Result<SvdResult<T>> {
    let (rows, cols) = m.shape();
    let max = rows.min(cols);
    if k == 0 || k > max {
        return Err(LinalgError::RankOutOfRange { k, max });
    }
    if !m.is_finite() {
        return Err(LinalgError::NonFinite("truncated_svd input"));
    }

    let transposed = rows < cols;
    // Columns of the tall matrix, stored contiguously.
    let mut columns: Vec<Vec<T>> = if transposed {
        (0..rows).map(|i| m.row(i).to_vec()).collect()
    } else {
        (0..cols).map(|j| m.column(j)).collect()
    };
    let width = columns.len();
    let mut right: Vec<Vec<T>> = (0..width)
        .map(|j| {
            let mut e = vec![T::zero(); width];
            e[j] = T::one();
            e
        })
        .collect();

    jacobi_sweeps(&mut columns, &mut right)?;

    let norms: Vec<T> = columns.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..width).collect();
    // Stable sort keeps index order on ties.
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).expect("finite norms"));
    order.truncate(k);

    let sigma_max = norms[order[0]];
    let height = columns[0].len();
    let zero_tol = sigma_max * T::epsilon() * T::of(height.max(width) as f64);

    let mut singular_values = Vec::with_capacity(k);
    let mut left: Vec<Vec<T>> = Vec::with_capacity(k);
    let mut valid = Vec::with_capacity(k);
    for &j in &order {
        let s = norms[j];
        if s > zero_tol && s > T::zero() {
            singular_values.push(s);
            left.push(columns[j].iter().map(|&v| v / s).collect());
            valid.push(true);
        } else {
            singular_values.push(T::zero());
            left.push(vec![T::zero(); height]);
            valid.push(false);
        }
    }
    complete_orthonormal(&mut left, &valid);
    let right_k: Vec<Vec<T>> = order.iter().map(|&j| right[j].clone()).collect();

    // `left` vectors live in the tall matrix's row space; `right_k` in its column space.
    let (u, vt) = if transposed {
        (
            Matrix::from_fn(rows, k, |i, j| right_k[j][i]),
            Matrix::from_fn(k, cols, |i, j| left[i][j]),
        )
    } else {
        (
            Matrix::from_fn(rows, k, |i, j| left[j][i]),
            Matrix::from_fn(k, cols, |i, j| right_k[i][j]),
        )
    };
    Ok(SvdResult {
        u,
        singular_values,
        vt,
    })
}

fn jacobi_sweeps<T: Scalar>(columns: &mut [Vec<T>], right: &mut [Vec<T>]) -> Result<()> {
    let width = columns.len();
    let tol = T::of(T::JACOBI_TOL);
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..width {
            for q in p + 1..width {
                let alpha = dot(&columns[p], &columns[p]);
                let beta = dot(&columns[q], &columns[q]);
                let gamma = dot(&columns[p], &columns[q]);
                let scale = (alpha * beta).sqrt();
                if gamma == T::zero() || scale == T::zero() || gamma.abs() <= tol * scale {
                    continue;
                }
                let zeta = (beta - alpha) / (T::of(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate(columns, p, q, c, s);
                rotate(right, p, q, c, s);
                rotated = true;
            }
        }
        if !rotated {
            return Ok(());
        }
    }
    Err(LinalgError::NoConvergence { sweeps: MAX_SWEEPS })
}

fn rotate<T: Scalar>(vs: &mut [Vec<T>], p: usize, q: usize, c: T, s: T) {
    let (lo, hi) = vs.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Replace invalid vectors by unit vectors orthogonal to all others (Gram–Schmidt
/// over the standard basis, applied twice for stability).
fn complete_orthonormal<T: Scalar>(vs: &mut [Vec<T>], valid: &[bool]) {
    let dim = vs.first().map(|v| v.len()).unwrap_or(0);
    let mut basis_next = 0;
    for i in 0..vs.len() {
        if valid[i] {
            continue;
        }
        while basis_next < dim {
            let mut cand = vec![T::zero(); dim];
            cand[basis_next] = T::one();
            basis_next += 1;
            for _ in 0..2 {
                for (j, v) in vs.iter().enumerate() {
                    if j == i || (!valid[j] && j > i) {
                        continue;
                    }
                    let proj = dot(&cand, v);
                    for (c, &x) in cand.iter_mut().zip(v) {
                        *c -= proj * x;
                    }
                }
            }
            let n = dot(&cand, &cand).sqrt();
            if n > T::of(0.5) {
                vs[i] = cand.into_iter().map(|c| c / n).collect();
                break;
            }
        }
    }
}
