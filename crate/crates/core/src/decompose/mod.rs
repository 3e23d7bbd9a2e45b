//! Activation-aware low-rank plus structured-sparse decomposition of a single
//! weight matrix.
//!
//! Work happens on the scaled weight `W·D`. The low-rank step is a truncated
//! SVD of `W·D − S`, the sparse step a PTC-column sparsification of
//! `W·D − A·B`. The returned factors are de-scaled so that `A·B + S`
//! approximates `W` itself.

mod adapt;
mod scaling;
mod sparse;

pub use adapt::{
    calibration_objective, local_adapt, AdaptConfig, AdaptParams, AdaptProblem, AdaptReport,
};
pub use scaling::{compute_scaling, ScalingDiag, SCALING_EPS};
pub use sparse::{chunk_bounds, kept_columns, structured_sparsify, SparseChunk, StructuredSparse};

use thiserror::Error;

use crate::linalg::{frobenius_norm, truncated_svd, LinalgError, Matrix};
use crate::scalar::Scalar;

/// Alternating iterations used when the caller has no preference.
pub const DEFAULT_ITERS: usize = 80;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecomposeError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("calibration activations are empty")]
    EmptyCalibration,
    #[error("sparse budget rounds to zero ({cols} columns at ratio {ratio})")]
    SparseBudgetZero { cols: usize, ratio: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("invalid structured sparse component: {0}")]
    InvalidSparse(String),
    #[error("scaled weight has zero norm")]
    ZeroNorm,
    #[error("non-finite gradient at adaptation step {step}")]
    NonFiniteGradient { step: usize },
}

pub type Result<T> = std::result::Result<T, DecomposeError>;

/// `W ≈ A·B + S` for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition<T> {
    /// m x r
    pub a: Matrix<T>,
    /// r x n
    pub b: Matrix<T>,
    pub sparse: StructuredSparse<T>,
    pub rank: usize,
    /// Scaled-domain objective after every half-step, starting with the first
    /// low-rank step (even indices: low-rank steps, odd: sparse steps).
    pub objective_trace: Vec<T>,
    pub best_objective: T,
}

impl<T: Scalar> Decomposition<T> {
    /// `A·B + expand(S)`, shape `m x n`.
    pub fn reconstruct(&self) -> Matrix<T> {
        let mut l = self.a.matmul(&self.b).expect("factor shapes agree");
        l.add_assign(&self.sparse.expand())
            .expect("sparse shape matches");
        l
    }

    /// Stored parameter count excluding indices: `r(m+n) + m·d`.
    pub fn param_count(&self) -> usize {
        let (m, n) = self.sparse.shape();
        self.rank * (m + n) + self.sparse.nnz()
    }

    /// Rank-`r` slice `A[:, :r]`, `B[:r, :]` with the same sparse part.
    pub fn truncated(&self, r: usize) -> Self {
        assert!(
            r >= 1 && r <= self.rank,
            "slice rank {r} outside 1..={}",
            self.rank
        );
        Self {
            a: self.a.left_cols(r),
            b: self.b.top_rows(r),
            sparse: self.sparse.clone(),
            rank: r,
            objective_trace: self.objective_trace.clone(),
            best_objective: self.best_objective,
        }
    }
}

fn check_params(
    w: &Matrix<impl Scalar>,
    n_scale: usize,
    r: usize,
    s: f64,
    g: usize,
    iters: usize,
) -> Result<()> {
    let (m, n) = w.shape();
    if n_scale != n {
        return Err(DecomposeError::InvalidParam(format!(
            "scaling has {n_scale} entries for {n} input columns"
        )));
    }
    if r == 0 || r > m.min(n) {
        return Err(DecomposeError::InvalidParam(format!(
            "rank {r} outside 1..={}",
            m.min(n)
        )));
    }
    if iters == 0 {
        return Err(DecomposeError::InvalidParam("iters must be >= 1".into()));
    }
    if g == 0 {
        return Err(DecomposeError::InvalidParam(
            "granularity must be >= 1".into(),
        ));
    }
    if !(s > 0.0 && s < 1.0) {
        return Err(DecomposeError::InvalidParam(format!(
            "sparse ratio {s} outside (0,1)"
        )));
    }
    Ok(())
}

struct Iterate<T> {
    a: Matrix<T>,
    b: Matrix<T>,
    sparse: StructuredSparse<T>,
}

/// Alternating low-rank / structured-sparse fit of `W·D`, starting from `S = 0`
/// with the low-rank step first. Returns the best iterate seen, de-scaled.
pub fn decompose_layer<T: Scalar>(
    w: &Matrix<T>,
    scaling: &ScalingDiag<T>,
    r: usize,
    s: f64,
    g: usize,
    iters: usize,
) -> Result<Decomposition<T>> {
    check_params(w, scaling.len(), r, s, g, iters)?;
    let (m, n) = w.shape();
    let d = kept_columns(n, s);
    if d == 0 {
        return Err(DecomposeError::SparseBudgetZero { cols: n, ratio: s });
    }
    let wd = w.scale_columns(&scaling.d);
    let tiny = frobenius_norm(&wd) * T::of(1e-15);

    let mut sparse = StructuredSparse::zeros(m, n, g, d);
    let mut trace: Vec<T> = Vec::with_capacity(2 * iters);
    let mut best: Option<(T, Iterate<T>)> = None;
    let consider = |obj: T, it: &dyn Fn() -> Iterate<T>, best: &mut Option<(T, Iterate<T>)>| {
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            *best = Some((obj, it()));
        }
    };

    for _ in 0..iters {
        // Low-rank step.
        let target = wd.sub(&sparse.expand())?;
        let svd = truncated_svd(&target, r)?;
        let (a, b) = svd.balanced_factors();
        let low = a.matmul(&b)?;
        let obj = frobenius_norm(&target.sub(&low)?);
        if let Some(&prev) = trace.last() {
            debug_assert!(
                obj <= prev + prev * T::of(1e-9) + tiny,
                "low-rank step increased the objective: {prev} -> {obj}"
            );
        }
        trace.push(obj);
        consider(
            obj,
            &|| Iterate {
                a: a.clone(),
                b: b.clone(),
                sparse: sparse.clone(),
            },
            &mut best,
        );
        if obj <= tiny {
            break;
        }

        // Sparse step.
        let residual = wd.sub(&low)?;
        sparse = structured_sparsify(&residual, g, s)?;
        let obj = frobenius_norm(&residual.sub(&sparse.expand())?);
        trace.push(obj);
        consider(
            obj,
            &|| Iterate {
                a: a.clone(),
                b: b.clone(),
                sparse: sparse.clone(),
            },
            &mut best,
        );
        if obj <= tiny {
            break;
        }
    }

    let (best_objective, it) = best.expect("at least one iteration ran");
    let inv = scaling.inverse();
    Ok(Decomposition {
        a: it.a,
        b: it.b.scale_columns(&inv),
        sparse: it.sparse.scale_columns(&inv),
        rank: r,
        objective_trace: trace,
        best_objective,
    })
}

/// Normalized activation-aware error `‖W·D − (A·B + S)·D‖ / ‖W·D‖`.
pub fn layer_error<T: Scalar>(
    w: &Matrix<T>,
    scaling: &ScalingDiag<T>,
    dec: &Decomposition<T>,
) -> Result<T> {
    let wd = w.scale_columns(&scaling.d);
    let denom = frobenius_norm(&wd);
    if denom == T::zero() {
        return Err(DecomposeError::ZeroNorm);
    }
    let approx = dec.reconstruct().scale_columns(&scaling.d);
    Ok(frobenius_norm(&wd.sub(&approx)?) / denom)
}
