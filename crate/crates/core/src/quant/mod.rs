//! 8-bit symmetric post-training quantization and seeded multiplicative noise
//! for checking that a model tolerates photonic-core precision.
//!
//! Noise streams come from ChaCha20 (`rand_chacha::ChaCha20Rng`) seeded with
//! the run seed, with the stream number set to the 64-bit FNV-1a hash of the
//! tensor id. Uniforms take the top 53 bits of each `u64`; normal deviates use
//! the Box-Muller transform `sqrt(-2 ln(1-u1)) · cos(2π u2)`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decompose::StructuredSparse;
use crate::linalg::Matrix;
use crate::model::{argmax, Dataset, Executor, LinearOp, Model, ModelError};
use crate::scalar::Scalar;

/// Largest code magnitude; -128 is never produced.
pub const QMAX: i32 = 127;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("cannot quantize non-finite values")]
    NonFinite,
    #[error("noise ratio {0} must be finite and >= 0")]
    BadRatio(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantAxis {
    /// One scale per row (output channel).
    PerOutputChannel,
    PerTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    /// Row-major codes in `[-127, 127]`.
    pub codes: Vec<i8>,
    /// One entry per row, or a single entry for [`QuantAxis::PerTensor`].
    pub scales: Vec<f64>,
    pub axis: QuantAxis,
}

impl QuantizedTensor {
    pub fn scale_of_row(&self, i: usize) -> f64 {
        match self.axis {
            QuantAxis::PerOutputChannel => self.scales[i],
            QuantAxis::PerTensor => self.scales[0],
        }
    }
}

fn scale_for(max_abs: f64) -> f64 {
    if max_abs > 0.0 {
        max_abs / QMAX as f64
    } else {
        1.0
    }
}

pub fn quantize<T: Scalar>(m: &Matrix<T>, axis: QuantAxis) -> Result<QuantizedTensor, QuantError> {
    if !m.is_finite() {
        return Err(QuantError::NonFinite);
    }
    let (rows, cols) = m.shape();
    let row_max = |i: usize| {
        m.row(i)
            .iter()
            .fold(0.0f64, |a, v| a.max(v.to_f64_lossy().abs()))
    };
    let scales: Vec<f64> = match axis {
        QuantAxis::PerOutputChannel => (0..rows).map(|i| scale_for(row_max(i))).collect(),
        QuantAxis::PerTensor => vec![scale_for((0..rows).map(row_max).fold(0.0, f64::max))],
    };
    let mut codes = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let s = match axis {
            QuantAxis::PerOutputChannel => scales[i],
            QuantAxis::PerTensor => scales[0],
        };
        for &v in m.row(i) {
            let q = (v.to_f64_lossy() / s).round_ties_even();
            codes.push(q.clamp(-(QMAX as f64), QMAX as f64) as i8);
        }
    }
    Ok(QuantizedTensor {
        rows,
        cols,
        codes,
        scales,
        axis,
    })
}

pub fn dequantize<T: Scalar>(q: &QuantizedTensor) -> Matrix<T> {
    Matrix::from_fn(q.rows, q.cols, |i, j| {
        T::of(f64::from(q.codes[i * q.cols + j]) * q.scale_of_row(i))
    })
}

/// `dequantize(quantize(m))`.
pub fn fake_quant<T: Scalar>(m: &Matrix<T>, axis: QuantAxis) -> Result<Matrix<T>, QuantError> {
    Ok(dequantize(&quantize(m, axis)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// `z ~ N(0, 1)`.
    #[default]
    Gaussian,
    /// `z ~ U(-√3, √3)`, also unit variance.
    Uniform,
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Reproducible unit-variance deviates for one `(seed, tensor id)` pair.
pub struct NoiseStream {
    rng: ChaCha20Rng,
    kind: NoiseKind,
    spare: Option<f64>,
}

impl NoiseStream {
    pub fn new(seed: u64, tensor_id: &str, kind: NoiseKind) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(fnv1a(tensor_id.as_bytes()));
        Self {
            rng,
            kind,
            spare: None,
        }
    }

    fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_z(&mut self) -> f64 {
        match self.kind {
            NoiseKind::Uniform => (2.0 * self.uniform() - 1.0) * 3f64.sqrt(),
            NoiseKind::Gaussian => {
                if let Some(z) = self.spare.take() {
                    return z;
                }
                let u1 = 1.0 - self.uniform();
                let u2 = self.uniform();
                let rad = (-2.0 * u1.ln()).sqrt();
                let theta = std::f64::consts::TAU * u2;
                self.spare = Some(rad * theta.sin());
                rad * theta.cos()
            }
        }
    }
}

/// `m[i,j] · (1 + ratio · z[i,j])` with Gaussian `z` from the stream of
/// `(seed, "")`.
pub fn inject_noise<T: Scalar>(
    m: &Matrix<T>,
    ratio: f64,
    seed: u64,
) -> Result<Matrix<T>, QuantError> {
    inject_noise_with(m, ratio, seed, "", NoiseKind::Gaussian)
}

pub fn inject_noise_with<T: Scalar>(
    m: &Matrix<T>,
    ratio: f64,
    seed: u64,
    tensor_id: &str,
    kind: NoiseKind,
) -> Result<Matrix<T>, QuantError> {
    if !(ratio.is_finite() && ratio >= 0.0) {
        return Err(QuantError::BadRatio(ratio));
    }
    if ratio == 0.0 {
        return Ok(m.clone());
    }
    let mut stream = NoiseStream::new(seed, tensor_id, kind);
    let r = T::of(ratio);
    let mut out = m.clone();
    for v in out.data_mut() {
        *v *= T::one() + r * T::of(stream.next_z());
    }
    Ok(out)
}

/// Precision settings for a quantized and/or noisy evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantNoiseConfig {
    /// 8-bit per-output-channel weights and per-tensor activations.
    pub quantize: bool,
    /// Relative noise on weights and on every layer input.
    pub noise_ratio: f64,
    pub noise_kind: NoiseKind,
    pub seed: u64,
}

impl Default for QuantNoiseConfig {
    fn default() -> Self {
        Self {
            quantize: true,
            noise_ratio: 0.0,
            noise_kind: NoiseKind::Gaussian,
            seed: 0,
        }
    }
}

impl QuantNoiseConfig {
    fn weight<T: Scalar>(&self, m: &Matrix<T>, id: &str) -> Result<Matrix<T>, QuantError> {
        let q = if self.quantize {
            fake_quant(m, QuantAxis::PerOutputChannel)?
        } else {
            m.clone()
        };
        inject_noise_with(&q, self.noise_ratio, self.seed, id, self.noise_kind)
    }

    fn activation<T: Scalar>(&self, x: &Matrix<T>, id: &str) -> Result<Matrix<T>, QuantError> {
        let q = if self.quantize {
            fake_quant(x, QuantAxis::PerTensor)?
        } else {
            x.clone()
        };
        inject_noise_with(
            &q,
            self.noise_ratio,
            self.seed,
            &format!("{id}.input"),
            self.noise_kind,
        )
    }
}

fn sparse_weights<T: Scalar>(
    sp: &StructuredSparse<T>,
    cfg: &QuantNoiseConfig,
    id: &str,
) -> Result<StructuredSparse<T>, QuantError> {
    let values = cfg.weight(&sp.stacked_values(), &format!("{id}.s.values"))?;
    let mut out = sp.clone();
    let mut row = 0;
    for chunk in &mut out.chunks {
        for i in 0..chunk.values.rows() {
            chunk.values.row_mut(i).copy_from_slice(values.row(row + i));
        }
        row += chunk.values.rows();
    }
    Ok(out)
}

/// A copy of `model` whose weights went through the configured quantization
/// and noise. Decomposed layers transform `A`, `B` and the sparse values
/// separately, as they are encoded separately.
pub fn transform_weights<T: Scalar>(
    model: &Model<T>,
    cfg: &QuantNoiseConfig,
) -> Result<Model<T>, ModelError> {
    let wrap = |id: &str, e: QuantError| ModelError::Invalid(format!("layer {id}: {e}"));
    let mut out = model.clone();
    let ids: Vec<String> = model.ops().into_iter().map(|(id, _)| id).collect();
    for id in ids {
        let op = out.op_mut(&id).expect("id came from ops()");
        match op {
            LinearOp::Dense(w) => {
                *w = cfg
                    .weight(w, &format!("{id}.weight"))
                    .map_err(|e| wrap(&id, e))?
            }
            LinearOp::Compressed(d) => {
                d.a = cfg
                    .weight(&d.a, &format!("{id}.a"))
                    .map_err(|e| wrap(&id, e))?;
                d.b = cfg
                    .weight(&d.b, &format!("{id}.b"))
                    .map_err(|e| wrap(&id, e))?;
                d.sparse = sparse_weights(&d.sparse, cfg, &id).map_err(|e| wrap(&id, e))?;
            }
        }
    }
    Ok(out)
}

/// Executor that quantizes and perturbs every layer input before the product.
#[derive(Debug)]
pub struct ActivationPrecision<E> {
    pub inner: E,
    pub cfg: QuantNoiseConfig,
}

impl<T: Scalar, E: Executor<T>> Executor<T> for ActivationPrecision<E> {
    fn linear(
        &mut self,
        id: &str,
        op: &LinearOp<T>,
        x: &Matrix<T>,
    ) -> crate::model::Result<Matrix<T>> {
        let xq = self
            .cfg
            .activation(x, id)
            .map_err(|e| ModelError::Invalid(format!("layer {id}: {e}")))?;
        self.inner.linear(id, op, &xq)
    }
}

/// Top-1 accuracy of `model` under the configured precision.
pub fn evaluate_with_precision<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
    cfg: &QuantNoiseConfig,
) -> Result<f64, ModelError> {
    let m = transform_weights(model, cfg)?;
    let mut exec = ActivationPrecision {
        inner: crate::model::Exact,
        cfg: *cfg,
    };
    let logits = m.forward_with(&data.inputs, &mut exec)?.logits;
    if logits.rows() != data.labels.len() || data.labels.is_empty() {
        return Err(ModelError::Invalid(format!(
            "{} predictions for {} labels",
            logits.rows(),
            data.labels.len()
        )));
    }
    let correct = (0..logits.rows())
        .filter(|&i| argmax(logits.row(i)) == data.labels[i])
        .count();
    Ok(correct as f64 / data.labels.len() as f64)
}
