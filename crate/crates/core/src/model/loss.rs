use super::{BlockFeatures, Dataset, Model, ModelError, Result};
use crate::linalg::{frobenius_norm, Matrix};
use crate::scalar::Scalar;

/// Mean squared Frobenius distance over all (attention, MLP) feature pairs.
pub fn block_loss<T: Scalar>(student: &BlockFeatures<T>, teacher: &BlockFeatures<T>) -> Result<T> {
    if student.attn.len() != teacher.attn.len() || student.mlp.len() != teacher.mlp.len() {
        return Err(ModelError::Invalid(format!(
            "feature sets differ: student {}+{}, teacher {}+{}",
            student.attn.len(),
            student.mlp.len(),
            teacher.attn.len(),
            teacher.mlp.len()
        )));
    }
    let pairs = student.attn.len() + student.mlp.len();
    if pairs == 0 {
        return Ok(T::zero());
    }
    let mut total = T::zero();
    let s = student.attn.iter().chain(&student.mlp);
    let t = teacher.attn.iter().chain(&teacher.mlp);
    for (fs, ft) in s.zip(t) {
        let n = frobenius_norm(&fs.sub(ft)?);
        total += n * n;
    }
    Ok(total / T::of(pairs as f64))
}

fn log_softmax<T: Scalar>(row: &[T], tau: T) -> Vec<T> {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v / tau));
    let lse = row.iter().map(|&v| (v / tau - max).exp()).sum::<T>().ln() + max;
    row.iter().map(|&v| v / tau - lse).collect()
}

/// Components of [`logit_loss`], each averaged over samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogitLoss<T> {
    /// `KL(softmax(y_s/τ) ‖ softmax(y_t/τ))`
    pub kl: T,
    /// Cross-entropy of the student logits against the labels.
    pub ce: T,
    /// `½·kl + ½·ce`
    pub total: T,
}

pub fn logit_loss_parts<T: Scalar>(
    y_s: &Matrix<T>,
    y_t: &Matrix<T>,
    labels: &[usize],
    tau: T,
) -> Result<LogitLoss<T>> {
    if !(tau > T::zero()) {
        return Err(ModelError::Invalid(format!(
            "temperature {tau} must be positive"
        )));
    }
    if y_s.shape() != y_t.shape() || labels.len() != y_s.rows() {
        return Err(ModelError::Invalid(format!(
            "student {:?}, teacher {:?}, {} labels",
            y_s.shape(),
            y_t.shape(),
            labels.len()
        )));
    }
    if !y_s.is_finite() || !y_t.is_finite() {
        return Err(ModelError::NonFinite("logits"));
    }
    let classes = y_s.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(ModelError::Invalid(format!(
            "label {bad} >= {classes} classes"
        )));
    }
    let n = y_s.rows();
    if n == 0 {
        return Err(ModelError::Invalid("no samples".into()));
    }
    let (mut kl, mut ce) = (T::zero(), T::zero());
    for i in 0..n {
        let ls = log_softmax(y_s.row(i), tau);
        let lt = log_softmax(y_t.row(i), tau);
        kl += ls
            .iter()
            .zip(&lt)
            .map(|(&a, &b)| a.exp() * (a - b))
            .sum::<T>();
        ce -= log_softmax(y_s.row(i), T::one())[labels[i]];
    }
    let nf = T::of(n as f64);
    let (kl, ce) = (kl / nf, ce / nf);
    let half = T::of(0.5);
    Ok(LogitLoss {
        kl,
        ce,
        total: half * kl + half * ce,
    })
}

/// `½·KL(softmax(y_s/τ) ‖ softmax(y_t/τ)) + ½·CE(y_s, labels)`, mean over samples.
pub fn logit_loss<T: Scalar>(
    y_s: &Matrix<T>,
    y_t: &Matrix<T>,
    labels: &[usize],
    tau: T,
) -> Result<T> {
    Ok(logit_loss_parts(y_s, y_t, labels, tau)?.total)
}

/// Index of the largest entry, lowest index on ties.
pub(crate) fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset<T>) -> Result<f64> {
    if data.labels.is_empty() {
        return Err(ModelError::Invalid("empty dataset".into()));
    }
    let logits = model.forward(&data.inputs)?.logits;
    if logits.rows() != data.labels.len() {
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
