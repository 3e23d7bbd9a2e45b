//! Functional model of photonic tensor core execution.
//!
//! A PTC invocation multiplies an `n_h x n_lambda` weight block by an
//! `n_lambda x n_v` input block. Larger products are tiled over invocations
//! with zero padding on ragged edges; partial sums over the inner dimension
//! accumulate in order of the inner block index.

use serde::{Deserialize, Serialize};

use super::{Result, SimError};
use crate::decompose::{chunk_bounds, StructuredSparse};
use crate::linalg::{LinalgError, Matrix};
use crate::model::{Executor, LinearOp, ModelError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PtcConfig {
    /// Vertical waveguides: token columns of an input block, and the row
    /// dimension that the sparse engine gates in quarters.
    pub n_v: usize,
    /// Horizontal waveguides: output rows of a weight block.
    pub n_h: usize,
    /// Wavelength channels: the inner (reduction) dimension.
    pub n_lambda: usize,
}

impl PtcConfig {
    pub const fn square(n: usize, n_lambda: usize) -> Self {
        Self {
            n_v: n,
            n_h: n,
            n_lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_v == 0 || self.n_h == 0 || self.n_lambda == 0 {
            return Err(SimError::Config(format!(
                "PTC dimensions must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Weight matrix cut into `n_v x n_h` blocks, `p = ceil(m/n_v)` block rows by
/// `q = ceil(n/n_h)` block columns, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrid<T> {
    pub p: usize,
    pub q: usize,
    pub rows: usize,
    pub cols: usize,
    pub blocks: Vec<Matrix<T>>,
}

pub fn tile_weight<T: Scalar>(w: &Matrix<T>, ptc: &PtcConfig) -> BlockGrid<T> {
    let (m, n) = w.shape();
    let (p, q) = (m.div_ceil(ptc.n_v), n.div_ceil(ptc.n_h));
    let mut blocks = Vec::with_capacity(p * q);
    for bi in 0..p {
        for bj in 0..q {
            blocks.push(w.block_padded(bi * ptc.n_v, bj * ptc.n_h, ptc.n_v, ptc.n_h));
        }
    }
    BlockGrid {
        p,
        q,
        rows: m,
        cols: n,
        blocks,
    }
}

/// Reassemble a [`BlockGrid`], dropping the padding.
pub fn untile<T: Scalar>(grid: &BlockGrid<T>) -> Matrix<T> {
    let (bh, bw) = grid.blocks.first().map(Matrix::shape).unwrap_or((1, 1));
    Matrix::from_fn(grid.rows, grid.cols, |i, j| {
        grid.blocks[(i / bh) * grid.q + j / bw][(i % bh, j % bw)]
    })
}

/// One PTC invocation: `[n_h x n_lambda] · [n_lambda x n_v]`.
pub fn ptc_matmul<T: Scalar>(
    w_blk: &Matrix<T>,
    x_blk: &Matrix<T>,
    ptc: &PtcConfig,
) -> Result<Matrix<T>> {
    if w_blk.shape() != (ptc.n_h, ptc.n_lambda) || x_blk.shape() != (ptc.n_lambda, ptc.n_v) {
        return Err(SimError::Linalg(LinalgError::DimensionMismatch {
            op: "ptc_matmul",
            lhs: w_blk.shape(),
            rhs: x_blk.shape(),
        }));
    }
    Ok(w_blk.matmul(x_blk)?)
}

/// Invocations needed for `[rows x inner] · [inner x tokens]`.
pub fn invocations(rows: usize, inner: usize, tokens: usize, ptc: &PtcConfig) -> u64 {
    (rows.div_ceil(ptc.n_h) * inner.div_ceil(ptc.n_lambda) * tokens.div_ceil(ptc.n_v)) as u64
}

/// Full product assembled from PTC invocations. Returns the product and the
/// invocation count.
pub fn tiled_matmul<T: Scalar>(
    w: &Matrix<T>,
    x: &Matrix<T>,
    ptc: &PtcConfig,
) -> Result<(Matrix<T>, u64)> {
    if w.cols() != x.rows() {
        return Err(SimError::Linalg(LinalgError::DimensionMismatch {
            op: "tiled_matmul",
            lhs: w.shape(),
            rhs: x.shape(),
        }));
    }
    let (m, k) = w.shape();
    let t = x.cols();
    let mut out = Matrix::zeros(m, t);
    let mut count = 0;
    for r0 in (0..m).step_by(ptc.n_h) {
        for c0 in (0..t).step_by(ptc.n_v) {
            let mut acc = Matrix::zeros(ptc.n_h, ptc.n_v);
            for k0 in (0..k).step_by(ptc.n_lambda) {
                let wb = w.block_padded(r0, k0, ptc.n_h, ptc.n_lambda);
                let xb = x.block_padded(k0, c0, ptc.n_lambda, ptc.n_v);
                acc.add_assign(&ptc_matmul(&wb, &xb, ptc)?)?;
                count += 1;
            }
            for i in 0..ptc.n_h.min(m - r0) {
                for j in 0..ptc.n_v.min(t - c0) {
                    out[(r0 + i, c0 + j)] = acc[(i, j)];
                }
            }
        }
    }
    Ok((out, count))
}

/// Condensed sparse product on a PTC: each chunk's `g x d` block times its
/// gathered inputs, tiled like [`tiled_matmul`].
pub fn sparse_tiled_matmul<T: Scalar>(
    sp: &StructuredSparse<T>,
    x: &Matrix<T>,
    ptc: &PtcConfig,
) -> Result<(Matrix<T>, u64)> {
    if x.rows() != sp.full_cols {
        return Err(SimError::Linalg(LinalgError::DimensionMismatch {
            op: "sparse_tiled_matmul",
            lhs: sp.shape(),
            rhs: x.shape(),
        }));
    }
    let mut out = Matrix::zeros(sp.full_rows, x.cols());
    let mut count = 0;
    for ((r0, _), chunk) in chunk_bounds(sp.full_rows, sp.granularity).zip(&sp.chunks) {
        if chunk.kept_cols.iter().any(|&c| c >= x.rows()) {
            return Err(SimError::Config(format!(
                "sparse index out of range in chunk at row {r0}"
            )));
        }
        let gathered = x.gather_rows(&chunk.kept_cols);
        let (part, n) = tiled_matmul(&chunk.values, &gathered, ptc)?;
        count += n;
        for i in 0..part.rows() {
            out.row_mut(r0 + i).copy_from_slice(part.row(i));
        }
    }
    Ok((out, count))
}

/// Forward-pass executor that runs every product through PTC tiles: dense
/// weights and low-rank factors on the dense PTC, sparse parts on the sparse
/// PTC, with the two outputs summed.
#[derive(Debug, Clone)]
pub struct PtcExecutor {
    pub dense: PtcConfig,
    pub sparse: PtcConfig,
    pub dense_invocations: u64,
    pub sparse_invocations: u64,
}

impl PtcExecutor {
    pub fn new(dense: PtcConfig, sparse: PtcConfig) -> Self {
        Self {
            dense,
            sparse,
            dense_invocations: 0,
            sparse_invocations: 0,
        }
    }
}

impl<T: Scalar> Executor<T> for PtcExecutor {
    fn linear(
        &mut self,
        id: &str,
        op: &LinearOp<T>,
        x: &Matrix<T>,
    ) -> crate::model::Result<Matrix<T>> {
        let wrap = |e: SimError| ModelError::Invalid(format!("layer {id}: {e}"));
        match op {
            LinearOp::Dense(w) => {
                let (y, n) = tiled_matmul(w, x, &self.dense).map_err(wrap)?;
                self.dense_invocations += n;
                Ok(y)
            }
            LinearOp::Compressed(d) => {
                let (bx, n1) = tiled_matmul(&d.b, x, &self.dense).map_err(wrap)?;
                let (mut y, n2) = tiled_matmul(&d.a, &bx, &self.dense).map_err(wrap)?;
                let (sx, n3) = sparse_tiled_matmul(&d.sparse, x, &self.sparse).map_err(wrap)?;
                y.add_assign(&sx)?;
                self.dense_invocations += n1 + n2;
                self.sparse_invocations += n3;
                Ok(y)
            }
        }
    }
}
