//! Executable toy models, distillation losses and top-1 evaluation.
//!
//! Activations flow as `features x tokens` matrices (one token per column).
//! Every weight multiplication goes through an [`Executor`], which lets the
//! calibration recorder and the photonic simulator observe or replace the
//! products without touching the model code.

mod io;
mod loss;
pub(crate) mod vit;

pub use io::{dataset_from_store, dataset_to_store, Dataset};
pub(crate) use loss::argmax;
pub use loss::{block_loss, evaluate, logit_loss, logit_loss_parts, LogitLoss};
pub use vit::{LayerNorm, ToyViT, VitBlock, VitDims};

use std::collections::BTreeMap;

use thiserror::Error;

use crate::decompose::{DecomposeError, Decomposition};
use crate::linalg::{LinalgError, Matrix};
use crate::scalar::Scalar;
use crate::store::{ModelGraph, StoreError, TensorStore};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("layer {layer}: expected input with {expected} rows, got {got}")]
    Shape {
        layer: String,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Decompose(#[from] DecomposeError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{0}")]
    Invalid(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// A weight matrix in dense or decomposed form.
#[derive(Debug, Clone, PartialEq)]
pub enum LinearOp<T> {
    Dense(Matrix<T>),
    /// Applied as `A·(B·X) + S·X` with the condensed sparse product.
    Compressed(Decomposition<T>),
}

impl<T: Scalar> LinearOp<T> {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            LinearOp::Dense(w) => w.shape(),
            LinearOp::Compressed(d) => d.sparse.shape(),
        }
    }

    /// The dense matrix this operator represents.
    pub fn dense(&self) -> Matrix<T> {
        match self {
            LinearOp::Dense(w) => w.clone(),
            LinearOp::Compressed(d) => d.reconstruct(),
        }
    }

    pub fn apply(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        match self {
            LinearOp::Dense(w) => Ok(w.matmul(x)?),
            LinearOp::Compressed(d) => {
                let mut out = d.a.matmul(&d.b.matmul(x)?)?;
                out.add_assign(&d.sparse.condensed_matmul(x)?)?;
                Ok(out)
            }
        }
    }
}

/// Carries out the weight products of a forward pass.
pub trait Executor<T: Scalar> {
    fn linear(&mut self, id: &str, op: &LinearOp<T>, x: &Matrix<T>) -> Result<Matrix<T>>;
}

/// Reference executor: plain [`LinearOp::apply`].
#[derive(Debug, Default, Clone, Copy)]
pub struct Exact;

impl<T: Scalar> Executor<T> for Exact {
    fn linear(&mut self, _id: &str, op: &LinearOp<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
        op.apply(x)
    }
}

/// Wraps another executor and keeps a copy of every layer input.
#[derive(Debug, Default)]
pub struct Recorder<T, E> {
    pub inner: E,
    pub inputs: BTreeMap<String, Matrix<T>>,
}

impl<T: Scalar, E: Executor<T>> Executor<T> for Recorder<T, E> {
    fn linear(&mut self, id: &str, op: &LinearOp<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.inputs.insert(id.to_string(), x.clone());
        self.inner.linear(id, op, x)
    }
}

pub(crate) fn run_linear<T: Scalar>(
    exec: &mut dyn Executor<T>,
    id: &str,
    op: &LinearOp<T>,
    x: &Matrix<T>,
) -> Result<Matrix<T>> {
    let (_, n) = op.shape();
    if x.rows() != n {
        return Err(ModelError::Shape {
            layer: id.to_string(),
            expected: n,
            got: x.rows(),
        });
    }
    exec.linear(id, op, x)
}

/// Per-block hidden states after the attention residual and after the MLP
/// residual, each `tokens x hidden`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BlockFeatures<T> {
    pub attn: Vec<Matrix<T>>,
    pub mlp: Vec<Matrix<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    /// One row of class scores per sample.
    pub logits: Matrix<T>,
    pub features: BlockFeatures<T>,
    /// Attention probabilities (queries x keys), per block, sample and head.
    pub attention: Vec<Matrix<T>>,
}

/// Purely linear stack `W_k ··· W_1`, each token an independent sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearChain<T> {
    pub layers: Vec<(String, LinearOp<T>)>,
}

impl<T: Scalar> LinearChain<T> {
    pub fn forward_with(
        &self,
        inputs: &Matrix<T>,
        exec: &mut dyn Executor<T>,
    ) -> Result<ForwardOutput<T>> {
        let mut h = inputs.clone();
        for (id, op) in &self.layers {
            h = run_linear(exec, id, op, &h)?;
        }
        Ok(ForwardOutput {
            logits: h.transpose(),
            features: BlockFeatures::default(),
            attention: Vec::new(),
        })
    }
}

/// A model that can be loaded from an LTEN container.
#[derive(Debug, Clone, PartialEq)]
pub enum Model<T> {
    Vit(ToyViT<T>),
    Chain(LinearChain<T>),
}

impl<T: Scalar> Model<T> {
    pub fn forward(&self, inputs: &Matrix<T>) -> Result<ForwardOutput<T>> {
        self.forward_with(inputs, &mut Exact)
    }

    pub fn forward_with(
        &self,
        inputs: &Matrix<T>,
        exec: &mut dyn Executor<T>,
    ) -> Result<ForwardOutput<T>> {
        match self {
            Model::Vit(m) => m.forward_with(inputs, exec),
            Model::Chain(m) => m.forward_with(inputs, exec),
        }
    }

    /// Tokens that make up one classified sample.
    pub fn tokens_per_sample(&self) -> usize {
        match self {
            Model::Vit(m) => m.dims.seq_len,
            Model::Chain(_) => 1,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Model::Vit(m) => m.dims.input_dim,
            Model::Chain(c) => c.layers.first().map(|(_, op)| op.shape().1).unwrap_or(0),
        }
    }

    /// All weight operators in execution order.
    pub fn ops(&self) -> Vec<(String, &LinearOp<T>)> {
        match self {
            Model::Vit(m) => m.ops(),
            Model::Chain(c) => c.layers.iter().map(|(id, op)| (id.clone(), op)).collect(),
        }
    }

    pub fn op_mut(&mut self, id: &str) -> Option<&mut LinearOp<T>> {
        match self {
            Model::Vit(m) => m.op_mut(id),
            Model::Chain(c) => c.layers.iter_mut().find(|(i, _)| i == id).map(|(_, op)| op),
        }
    }

    pub fn graph(&self) -> ModelGraph {
        io::graph_of(self)
    }

    pub fn to_store(&self) -> (ModelGraph, TensorStore) {
        io::model_to_store(self)
    }

    pub fn from_store(graph: &ModelGraph, tensors: &TensorStore) -> Result<Self> {
        io::model_from_store(graph, tensors)
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let (g, t) = self.to_store();
        Model::from_store(&g, &t).expect("a model always round-trips through its own store")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compressed_op_matches_dense_reconstruction() {
        use crate::decompose::{decompose_layer, ScalingDiag};
        let w = Matrix::<f64>::from_fn(6, 8, |i, j| ((i * 8 + j) as f64 * 0.37).sin());
        let dec = decompose_layer(&w, &ScalingDiag::identity(8), 2, 0.25, 3, 5).unwrap();
        let op = LinearOp::Compressed(dec);
        let x = Matrix::from_fn(8, 3, |i, j| (i as f64 - j as f64) * 0.1);
        let got = op.apply(&x).unwrap();
        let want = op.dense().matmul(&x).unwrap();
        assert!(got.sub(&want).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn chain_shape_error_names_layer() {
        let chain = LinearChain {
            layers: vec![
                (
                    "l0".to_string(),
                    LinearOp::Dense(Matrix::<f64>::identity(3)),
                ),
                (
                    "l1".to_string(),
                    LinearOp::Dense(Matrix::<f64>::identity(4)),
                ),
            ],
        };
        let err = chain
            .forward_with(&Matrix::zeros(3, 1), &mut Exact)
            .unwrap_err();
        assert!(err.to_string().contains("l1"), "{err}");
    }
}
