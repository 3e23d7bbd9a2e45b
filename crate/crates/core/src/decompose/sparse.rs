//! PTC-column structured sparsity with per-chunk condensation.
//!
//! Rows are cut into chunks of height `g`. Inside each chunk the length-`g`
//! column vectors are ranked by L1 norm and the top `d` survive. Survivors are
//! stored condensed: a `g x d` dense block plus the ascending column indices.

use super::{DecomposeError, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// One row-chunk of a [`StructuredSparse`] matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseChunk<T> {
    /// Ascending kept column indices, length `d`.
    pub kept_cols: Vec<usize>,
    /// Condensed values, `chunk_rows x d`.
    pub values: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuredSparse<T> {
    pub granularity: usize,
    pub full_rows: usize,
    pub full_cols: usize,
    pub chunks: Vec<SparseChunk<T>>,
}

/// Kept columns per chunk for `n` columns at ratio `s`.
pub fn kept_columns(n: usize, s: f64) -> usize {
    (n as f64 * s).round() as usize
}

impl<T: Scalar> StructuredSparse<T> {
    /// All-zero structure with the leading `d` columns kept in every chunk.
    pub fn zeros(rows: usize, cols: usize, g: usize, d: usize) -> Self {
        let chunks = chunk_bounds(rows, g)
            .map(|(r0, r1)| SparseChunk {
                kept_cols: (0..d).collect(),
                values: Matrix::zeros(r1 - r0, d),
            })
            .collect();
        Self {
            granularity: g,
            full_rows: rows,
            full_cols: cols,
            chunks,
        }
    }

    /// Kept columns per chunk.
    pub fn kept(&self) -> usize {
        self.chunks.first().map(|c| c.kept_cols.len()).unwrap_or(0)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.full_rows, self.full_cols)
    }

    /// Stored value count (`m·d`).
    pub fn nnz(&self) -> usize {
        self.full_rows * self.kept()
    }

    /// Checks chunk count, per-chunk width, index order and bounds.
    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(DecomposeError::InvalidSparse(msg));
        if self.granularity == 0 {
            return invalid("granularity is zero".into());
        }
        let expected = self.full_rows.div_ceil(self.granularity);
        if self.chunks.len() != expected {
            return invalid(format!("{} chunks, expected {expected}", self.chunks.len()));
        }
        let d = self.kept();
        for (ci, ((r0, r1), chunk)) in chunk_bounds(self.full_rows, self.granularity)
            .zip(&self.chunks)
            .enumerate()
        {
            if chunk.kept_cols.len() != d {
                return invalid(format!(
                    "chunk {ci} keeps {} columns, expected {d}",
                    chunk.kept_cols.len()
                ));
            }
            if chunk.values.shape() != (r1 - r0, d) {
                return invalid(format!(
                    "chunk {ci} values have shape {:?}",
                    chunk.values.shape()
                ));
            }
            if chunk.kept_cols.windows(2).any(|w| w[0] >= w[1]) {
                return invalid(format!("chunk {ci} indices not strictly increasing"));
            }
            if let Some(&bad) = chunk.kept_cols.iter().find(|&&c| c >= self.full_cols) {
                return invalid(format!("chunk {ci} index {bad} >= {}", self.full_cols));
            }
        }
        Ok(())
    }

    /// Scatter the condensed chunks back to a dense `m x n` matrix.
    pub fn expand(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.full_rows, self.full_cols);
        for ((r0, _), chunk) in chunk_bounds(self.full_rows, self.granularity).zip(&self.chunks) {
            for i in 0..chunk.values.rows() {
                for (k, &c) in chunk.kept_cols.iter().enumerate() {
                    out[(r0 + i, c)] = chunk.values[(i, k)];
                }
            }
        }
        out
    }

    /// `expand(self) · x` computed from the condensed form: each chunk gathers
    /// its kept rows of `x` and multiplies them by its `g x d` block.
    pub fn condensed_matmul(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.rows() != self.full_cols {
            return Err(DecomposeError::Linalg(
                crate::linalg::LinalgError::DimensionMismatch {
                    op: "condensed_matmul",
                    lhs: self.shape(),
                    rhs: x.shape(),
                },
            ));
        }
        let mut out = Matrix::zeros(self.full_rows, x.cols());
        for (ci, ((r0, _), chunk)) in chunk_bounds(self.full_rows, self.granularity)
            .zip(&self.chunks)
            .enumerate()
        {
            if let Some(&bad) = chunk.kept_cols.iter().find(|&&c| c >= x.rows()) {
                return Err(DecomposeError::InvalidSparse(format!(
                    "chunk {ci} index {bad} out of range for {} input rows",
                    x.rows()
                )));
            }
            let gathered = x.gather_rows(&chunk.kept_cols);
            let part = chunk.values.matmul(&gathered)?;
            for i in 0..part.rows() {
                out.row_mut(r0 + i).copy_from_slice(part.row(i));
            }
        }
        Ok(out)
    }

    /// Multiply every stored value in column `j` by `factors[j]`.
    pub fn scale_columns(&self, factors: &[T]) -> Self {
        let mut out = self.clone();
        for chunk in &mut out.chunks {
            for i in 0..chunk.values.rows() {
                for (k, &c) in chunk.kept_cols.iter().enumerate() {
                    chunk.values[(i, k)] *= factors[c];
                }
            }
        }
        out
    }

    /// Condensed values of all chunks stacked vertically: `m x d`.
    pub fn stacked_values(&self) -> Matrix<T> {
        let d = self.kept();
        let mut data = Vec::with_capacity(self.full_rows * d);
        for chunk in &self.chunks {
            data.extend_from_slice(chunk.values.data());
        }
        Matrix::from_vec(self.full_rows, d, data).expect("chunks tile the rows")
    }

    /// Index table, one row of `d` column indices per chunk.
    pub fn index_table(&self) -> Vec<Vec<usize>> {
        self.chunks.iter().map(|c| c.kept_cols.clone()).collect()
    }

    /// Inverse of [`stacked_values`](Self::stacked_values) + [`index_table`](Self::index_table).
    /// The result is not validated.
    pub fn from_stacked(
        values: &Matrix<T>,
        indices: Vec<Vec<usize>>,
        granularity: usize,
        full_cols: usize,
    ) -> Result<Self> {
        let rows = values.rows();
        let d = values.cols();
        if granularity == 0 || indices.len() != rows.div_ceil(granularity) {
            return Err(DecomposeError::InvalidSparse(format!(
                "{} index rows for {rows} rows at granularity {granularity}",
                indices.len()
            )));
        }
        let chunks = chunk_bounds(rows, granularity)
            .zip(indices)
            .map(|((r0, r1), kept_cols)| SparseChunk {
                kept_cols,
                values: Matrix::from_fn(r1 - r0, d, |i, k| values[(r0 + i, k)]),
            })
            .collect();
        Ok(Self {
            granularity,
            full_rows: rows,
            full_cols,
            chunks,
        })
    }
}

/// Half-open row ranges of each chunk.
pub fn chunk_bounds(rows: usize, g: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..rows.div_ceil(g.max(1))).map(move |c| (c * g, ((c + 1) * g).min(rows)))
}

/// Keep the top `round(n·s)` columns (by L1 norm) of every height-`g` row chunk.
///
/// Ties go to the lower column index.
pub fn structured_sparsify<T: Scalar>(
    residual: &Matrix<T>,
    g: usize,
    s: f64,
) -> Result<StructuredSparse<T>> {
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
    let (m, n) = residual.shape();
    let d = kept_columns(n, s);
    if d == 0 {
        return Err(DecomposeError::SparseBudgetZero { cols: n, ratio: s });
    }
    let mut chunks = Vec::with_capacity(m.div_ceil(g));
    let mut norms = vec![T::zero(); n];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for (r0, r1) in chunk_bounds(m, g) {
        norms.iter_mut().for_each(|v| *v = T::zero());
        for i in r0..r1 {
            for (acc, &v) in norms.iter_mut().zip(residual.row(i)) {
                *acc += v.abs();
            }
        }
        order.clear();
        order.extend(0..n);
        order.sort_by(|&a, &b| {
            norms[b]
                .partial_cmp(&norms[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut kept: Vec<usize> = order[..d].to_vec();
        kept.sort_unstable();
        let values = Matrix::from_fn(r1 - r0, d, |i, k| residual[(r0 + i, kept[k])]);
        chunks.push(SparseChunk {
            kept_cols: kept,
            values,
        });
    }
    Ok(StructuredSparse {
        granularity: g,
        full_rows: m,
        full_cols: n,
        chunks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type M = Matrix<f64>;

    #[test]
    fn hand_example() {
        let r = M::from_rows(&[[1.0, -2.0, 0.5, 3.0], [1.0, 0.0, 0.5, -1.0]]);
        let sp = structured_sparsify(&r, 2, 0.5).unwrap();
        assert_eq!(sp.chunks.len(), 1);
        assert_eq!(sp.chunks[0].kept_cols, vec![0, 3]);
        assert_eq!(
            sp.chunks[0].values,
            M::from_rows(&[[1.0, 3.0], [1.0, -1.0]])
        );
        sp.validate().unwrap();
    }

    #[test]
    fn zero_residual() {
        let sp = structured_sparsify(&M::zeros(5, 8), 2, 0.25).unwrap();
        assert_eq!(sp.kept(), 2);
        assert_eq!(sp.expand(), M::zeros(5, 8));
        sp.validate().unwrap();
    }

    #[test]
    fn budget_rounding_to_zero_is_error() {
        let err = structured_sparsify(&M::zeros(4, 3), 2, 0.1).unwrap_err();
        assert!(err.to_string().contains("sparse budget rounds to zero"));
    }

    #[test]
    fn expand_single_chunk() {
        let sp = StructuredSparse {
            granularity: 2,
            full_rows: 2,
            full_cols: 3,
            chunks: vec![SparseChunk {
                kept_cols: vec![1],
                values: M::from_rows(&[[7.0], [8.0]]),
            }],
        };
        assert_eq!(
            sp.expand(),
            M::from_rows(&[[0.0, 7.0, 0.0], [0.0, 8.0, 0.0]])
        );
    }

    #[test]
    fn matches_exhaustive_ranking() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let r = M::from_fn(8, 16, |_, _| rng.gen_range(-1.0..1.0));
        let sp = structured_sparsify(&r, 4, 0.25).unwrap();
        let dense = sp.expand();
        for (c, chunk) in sp.chunks.iter().enumerate() {
            // Oracle: a column is kept iff fewer than d columns beat it.
            let l1 = |j: usize| (c * 4..c * 4 + 4).map(|i| r[(i, j)].abs()).sum::<f64>();
            let oracle: Vec<usize> = (0..16)
                .filter(|&j| {
                    (0..16)
                        .filter(|&o| l1(o) > l1(j) || (l1(o) == l1(j) && o < j))
                        .count()
                        < 4
                })
                .collect();
            assert_eq!(chunk.kept_cols, oracle);
            for i in c * 4..c * 4 + 4 {
                for j in 0..16 {
                    let want = if oracle.contains(&j) { r[(i, j)] } else { 0.0 };
                    assert_eq!(dense[(i, j)], want);
                }
            }
        }
    }

    #[test]
    fn ragged_last_chunk() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = M::from_fn(7, 10, |_, _| rng.gen_range(-1.0..1.0));
        let sp = structured_sparsify(&r, 3, 0.3).unwrap();
        assert_eq!(sp.chunks.len(), 3);
        assert_eq!(sp.chunks[2].values.rows(), 1);
        sp.validate().unwrap();
    }

    #[test]
    fn stacked_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = M::from_fn(10, 12, |_, _| rng.gen_range(-1.0..1.0));
        let sp = structured_sparsify(&r, 4, 0.25).unwrap();
        let back =
            StructuredSparse::from_stacked(&sp.stacked_values(), sp.index_table(), 4, 12).unwrap();
        assert_eq!(back, sp);
    }

    #[test]
    fn validate_catches_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = M::from_fn(4, 8, |_, _| rng.gen_range(-1.0..1.0));
        let mut sp = structured_sparsify(&r, 2, 0.25).unwrap();
        sp.chunks[1].kept_cols[1] = 9;
        assert!(sp.validate().is_err());
        sp.chunks[1].kept_cols = vec![3, 3];
        assert!(sp.validate().is_err());
    }

    #[test]
    fn condensed_product_matches_expand() {
        let r = M::from_rows(&[[1.0, -2.0, 0.5, 3.0], [1.0, 0.0, 0.5, -1.0]]);
        let sp = structured_sparsify(&r, 2, 0.5).unwrap();
        assert_eq!(sp.condensed_matmul(&M::identity(4)).unwrap(), sp.expand());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = M::from_fn(11, 9, |_, _| rng.gen_range(-1.0..1.0));
        let x = M::from_fn(9, 5, |_, _| rng.gen_range(-1.0..1.0));
        let sp = structured_sparsify(&r, 4, 0.3).unwrap();
        let oracle = sp.expand().matmul(&x).unwrap();
        let got = sp.condensed_matmul(&x).unwrap();
        assert!(got.sub(&oracle).unwrap().max_abs() <= 1e-12);
        assert!(sp.condensed_matmul(&M::zeros(8, 5)).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn invariants_hold(
                m in 1usize..20,
                n in 2usize..20,
                g in 1usize..7,
                s in 0.05f64..0.95,
                data in proptest::collection::vec(-5.0f64..5.0, 400),
            ) {
                let r = Matrix::from_fn(m, n, |i, j| data[(i * n + j) % data.len()]);
                match structured_sparsify(&r, g, s) {
                    Ok(sp) => {
                        prop_assert!(sp.validate().is_ok());
                        prop_assert_eq!(sp.chunks.len(), m.div_ceil(g));
                        prop_assert_eq!(sp.kept(), kept_columns(n, s));
                        let dense = sp.expand();
                        for ((r0, _), chunk) in chunk_bounds(m, g).zip(&sp.chunks) {
                            for i in 0..chunk.values.rows() {
                                for &c in &chunk.kept_cols {
                                    prop_assert_eq!(dense[(r0 + i, c)], r[(r0 + i, c)]);
                                }
                            }
                        }
                    }
                    Err(e) => {
                        let budget_zero = matches!(e, DecomposeError::SparseBudgetZero { .. });
                        prop_assert!(budget_zero);
                    }
                }
            }
        }
    }
}
