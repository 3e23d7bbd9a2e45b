use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{run_linear, BlockFeatures, Executor, ForwardOutput, LinearOp, ModelError, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitDims {
    pub input_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub blocks: usize,
    pub classes: usize,
    /// Tokens per sample.
    pub seq_len: usize,
}

impl VitDims {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.input_dim,
            self.hidden,
            self.heads,
            self.mlp_ratio,
            self.classes,
            self.seq_len,
        ];
        if counts.contains(&0) {
            return Err(ModelError::Invalid(format!("zero dimension in {self:?}")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(ModelError::Invalid(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn identity(n: usize) -> Self {
        Self {
            gamma: vec![T::one(); n],
            beta: vec![T::zero(); n],
        }
    }

    /// Normalizes every column (token) over the feature dimension.
    pub fn apply(&self, x: &Matrix<T>) -> Matrix<T> {
        let (n, t) = x.shape();
        let nf = T::of(n as f64);
        let mut out = Matrix::zeros(n, t);
        for j in 0..t {
            let mean = (0..n).map(|i| x[(i, j)]).sum::<T>() / nf;
            let var = (0..n).map(|i| (x[(i, j)] - mean).powi(2)).sum::<T>() / nf;
            let inv = T::one() / (var + T::of(LN_EPS)).sqrt();
            for i in 0..n {
                out[(i, j)] = (x[(i, j)] - mean) * inv * self.gamma[i] + self.beta[i];
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitBlock<T> {
    pub ln1: LayerNorm<T>,
    pub q: LinearOp<T>,
    pub k: LinearOp<T>,
    pub v: LinearOp<T>,
    pub o: LinearOp<T>,
    pub ln2: LayerNorm<T>,
    pub fc1: LinearOp<T>,
    pub fc2: LinearOp<T>,
}

/// Pre-norm ViT encoder without biases or positional embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyViT<T> {
    pub dims: VitDims,
    /// `hidden x input_dim`
    pub embed: LinearOp<T>,
    pub blocks: Vec<VitBlock<T>>,
    pub norm: LayerNorm<T>,
    /// `classes x hidden`
    pub head: LinearOp<T>,
}

pub(crate) const BLOCK_OPS: [&str; 6] =
    ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc1", "mlp.fc2"];

pub(crate) fn block_op_id(b: usize, name: &str) -> String {
    format!("blocks.{b}.{name}")
}

fn gelu<T: Scalar>(x: T) -> T {
    // tanh approximation
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    T::of(0.5) * x * (T::one() + (c * (x + T::of(0.044715) * x * x * x)).tanh())
}

/// Row-wise softmax of `scores` (queries x keys).
fn softmax_rows<T: Scalar>(scores: &mut Matrix<T>) {
    for i in 0..scores.rows() {
        let row = scores.row_mut(i);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

impl<T: Scalar> VitBlock<T> {
    fn op(&self, name: &str) -> Option<&LinearOp<T>> {
        Some(match name {
            "attn.q" => &self.q,
            "attn.k" => &self.k,
            "attn.v" => &self.v,
            "attn.o" => &self.o,
            "mlp.fc1" => &self.fc1,
            "mlp.fc2" => &self.fc2,
            _ => return None,
        })
    }

    fn op_mut(&mut self, name: &str) -> Option<&mut LinearOp<T>> {
        Some(match name {
            "attn.q" => &mut self.q,
            "attn.k" => &mut self.k,
            "attn.v" => &mut self.v,
            "attn.o" => &mut self.o,
            "mlp.fc1" => &mut self.fc1,
            "mlp.fc2" => &mut self.fc2,
            _ => return None,
        })
    }
}

impl<T: Scalar> ToyViT<T> {
    /// Seeded random model; weights uniform in `±1/sqrt(fan_in)`, layer norms identity.
    pub fn random(dims: VitDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dense = |rows: usize, cols: usize| {
            let bound = 1.0 / (cols as f64).sqrt();
            LinearOp::Dense(Matrix::from_fn(rows, cols, |_, _| {
                T::of(rng.gen_range(-bound..bound))
            }))
        };
        let h = dims.hidden;
        let f = h * dims.mlp_ratio;
        let embed = dense(h, dims.input_dim);
        let blocks = (0..dims.blocks)
            .map(|_| VitBlock {
                ln1: LayerNorm::identity(h),
                q: dense(h, h),
                k: dense(h, h),
                v: dense(h, h),
                o: dense(h, h),
                ln2: LayerNorm::identity(h),
                fc1: dense(f, h),
                fc2: dense(h, f),
            })
            .collect();
        let head = dense(dims.classes, h);
        Ok(Self {
            dims,
            embed,
            blocks,
            norm: LayerNorm::identity(h),
            head,
        })
    }

    pub fn ops(&self) -> Vec<(String, &LinearOp<T>)> {
        self.op_ids()
            .into_iter()
            .map(|id| {
                let op = self.op(&id).expect("id generated from the model");
                (id, op)
            })
            .collect()
    }

    /// Operator ids in execution order.
    pub fn op_ids(&self) -> Vec<String> {
        let mut ids = vec!["embed".to_string()];
        for b in 0..self.blocks.len() {
            ids.extend(BLOCK_OPS.iter().map(|n| block_op_id(b, n)));
        }
        ids.push("head".into());
        ids
    }

    pub fn op(&self, id: &str) -> Option<&LinearOp<T>> {
        match id {
            "embed" => Some(&self.embed),
            "head" => Some(&self.head),
            _ => {
                let (b, name) = parse_block_id(id)?;
                self.blocks.get(b)?.op(name)
            }
        }
    }

    pub fn op_mut(&mut self, id: &str) -> Option<&mut LinearOp<T>> {
        match id {
            "embed" => Some(&mut self.embed),
            "head" => Some(&mut self.head),
            _ => {
                let (b, name) = parse_block_id(id)?;
                self.blocks.get_mut(b)?.op_mut(name)
            }
        }
    }

    /// `inputs` is `input_dim x (samples · seq_len)`, samples stored contiguously.
    pub fn forward_with(
        &self,
        inputs: &Matrix<T>,
        exec: &mut dyn Executor<T>,
    ) -> Result<ForwardOutput<T>> {
        let d = self.dims;
        let total = inputs.cols();
        if !total.is_multiple_of(d.seq_len) {
            return Err(ModelError::Invalid(format!(
                "{total} tokens is not a multiple of the sequence length {}",
                d.seq_len
            )));
        }
        let samples = total / d.seq_len;
        let head_dim = d.hidden / d.heads;
        let scale = T::one() / T::of(head_dim as f64).sqrt();

        let mut h = run_linear(exec, "embed", &self.embed, inputs)?;
        let mut features = BlockFeatures::default();
        let mut attention = Vec::new();
        for (bi, blk) in self.blocks.iter().enumerate() {
            let a = blk.ln1.apply(&h);
            let q = run_linear(exec, &block_op_id(bi, "attn.q"), &blk.q, &a)?;
            let k = run_linear(exec, &block_op_id(bi, "attn.k"), &blk.k, &a)?;
            let v = run_linear(exec, &block_op_id(bi, "attn.v"), &blk.v, &a)?;
            let mut ctx = Matrix::zeros(d.hidden, total);
            for s in 0..samples {
                let c0 = s * d.seq_len;
                for hd in 0..d.heads {
                    let r0 = hd * head_dim;
                    let qs = q.block_padded(r0, c0, head_dim, d.seq_len);
                    let ks = k.block_padded(r0, c0, head_dim, d.seq_len);
                    let vs = v.block_padded(r0, c0, head_dim, d.seq_len);
                    let mut p = qs.transpose().matmul(&ks)?.scale(scale);
                    softmax_rows(&mut p);
                    let out = vs.matmul(&p.transpose())?;
                    for i in 0..head_dim {
                        for t in 0..d.seq_len {
                            ctx[(r0 + i, c0 + t)] = out[(i, t)];
                        }
                    }
                    attention.push(p);
                }
            }
            let o = run_linear(exec, &block_op_id(bi, "attn.o"), &blk.o, &ctx)?;
            h.add_assign(&o)?;
            features.attn.push(h.transpose());

            let m = blk.ln2.apply(&h);
            let f = run_linear(exec, &block_op_id(bi, "mlp.fc1"), &blk.fc1, &m)?.map(gelu);
            let f = run_linear(exec, &block_op_id(bi, "mlp.fc2"), &blk.fc2, &f)?;
            h.add_assign(&f)?;
            features.mlp.push(h.transpose());
        }
        let z = self.norm.apply(&h);
        let inv = T::one() / T::of(d.seq_len as f64);
        let pooled = Matrix::from_fn(d.hidden, samples, |i, s| {
            z.row(i)[s * d.seq_len..(s + 1) * d.seq_len]
                .iter()
                .copied()
                .sum::<T>()
                * inv
        });
        let logits = run_linear(exec, "head", &self.head, &pooled)?.transpose();
        if !logits.is_finite() {
            return Err(ModelError::NonFinite("logits"));
        }
        Ok(ForwardOutput {
            logits,
            features,
            attention,
        })
    }
}

pub(crate) fn parse_block_id(id: &str) -> Option<(usize, &str)> {
    let rest = id.strip_prefix("blocks.")?;
    let (b, name) = rest.split_once('.')?;
    Some((b.parse().ok()?, name))
}
