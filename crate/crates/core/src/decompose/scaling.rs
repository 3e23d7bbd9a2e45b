use super::{DecomposeError, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Relative floor applied to the scaling entries.
pub const SCALING_EPS: f64 = 1e-8;

/// Diagonal activation scaling `D = sqrt(diag(XᵀX))` over calibration tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingDiag<T> {
    pub d: Vec<T>,
    /// Set when at least one entry was raised to the floor.
    pub epsilon_clamped: bool,
}

impl<T: Scalar> ScalingDiag<T> {
    pub fn identity(n: usize) -> Self {
        Self {
            d: vec![T::one(); n],
            epsilon_clamped: false,
        }
    }

    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }

    pub fn inverse(&self) -> Vec<T> {
        self.d.iter().map(|&v| T::one() / v).collect()
    }
}

/// Per-input-channel 2-norm of the calibration activations (`n x T`, one
/// token per column), floored at `1e-8 · max(d)`.
///
/// An all-zero calibration matrix carries no channel information and yields
/// the identity scaling.
pub fn compute_scaling<T: Scalar>(x_calib: &Matrix<T>) -> Result<ScalingDiag<T>> {
    if x_calib.cols() == 0 || x_calib.rows() == 0 {
        return Err(DecomposeError::EmptyCalibration);
    }
    let mut d: Vec<T> = (0..x_calib.rows())
        .map(|j| {
            let row = Matrix::from_vec(1, x_calib.cols(), x_calib.row(j).to_vec())
                .expect("row slice has cols entries");
            row.frobenius_norm()
        })
        .collect();
    let max = d.iter().fold(T::zero(), |m, &v| m.max(v));
    if max == T::zero() {
        return Ok(ScalingDiag {
            d: vec![T::one(); d.len()],
            epsilon_clamped: true,
        });
    }
    let eps = T::of(SCALING_EPS) * max;
    let mut clamped = false;
    for v in &mut d {
        if *v < eps {
            *v = eps;
            clamped = true;
        }
    }
    Ok(ScalingDiag {
        d,
        epsilon_clamped: clamped,
    })
}
