use std::collections::BTreeMap;

use super::{get_matrix, matrix_to_tensor, ModelGraph, TensorStore};
use crate::linalg::Matrix;
use crate::model::{Exact, Model, ModelError, Recorder, Result};
use crate::scalar::Scalar;

/// Input activations (`n x tokens`) of every compressible layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet<T> {
    pub activations: BTreeMap<String, Matrix<T>>,
    /// Calibration tokens per layer.
    pub sample_count: usize,
}

impl<T: Scalar> CalibrationSet<T> {
    pub fn get(&self, id: &str) -> Option<&Matrix<T>> {
        self.activations.get(id)
    }
}

/// Run the model on `inputs` and keep the exact matrix entering each
/// compressible layer.
pub fn collect_calibration<T: Scalar>(
    graph: &ModelGraph,
    tensors: &TensorStore,
    inputs: &Matrix<T>,
) -> Result<CalibrationSet<T>> {
    let model = Model::from_store(graph, tensors)?;
    collect_from_model(&model, graph, inputs)
}

pub(crate) fn collect_from_model<T: Scalar>(
    model: &Model<T>,
    graph: &ModelGraph,
    inputs: &Matrix<T>,
) -> Result<CalibrationSet<T>> {
    if inputs.cols() == 0 {
        return Err(ModelError::Invalid(
            "calibration inputs have no tokens".into(),
        ));
    }
    let mut rec = Recorder {
        inner: Exact,
        inputs: BTreeMap::new(),
    };
    model.forward_with(inputs, &mut rec)?;
    let mut activations = BTreeMap::new();
    for layer in graph.compressible() {
        let x = rec
            .inputs
            .remove(&layer.id)
            .ok_or_else(|| ModelError::Invalid(format!("layer {} was never executed", layer.id)))?;
        if x.rows() != layer.cols {
            return Err(ModelError::Shape {
                layer: layer.id.clone(),
                expected: layer.cols,
                got: x.rows(),
            });
        }
        activations.insert(layer.id.clone(), x);
    }
    Ok(CalibrationSet {
        activations,
        sample_count: inputs.cols(),
    })
}

pub fn calibration_to_store<T: Scalar>(set: &CalibrationSet<T>) -> TensorStore {
    set.activations
        .iter()
        .map(|(id, x)| (format!("calib.{id}"), matrix_to_tensor(x)))
        .collect()
}

pub fn calibration_from_store<T: Scalar>(tensors: &TensorStore) -> Result<CalibrationSet<T>> {
    let mut activations = BTreeMap::new();
    for name in tensors.keys() {
        if let Some(id) = name.strip_prefix("calib.") {
            activations.insert(id.to_string(), get_matrix(tensors, name)?);
        }
    }
    let sample_count = activations.values().next().map(Matrix::cols).unwrap_or(0);
    if activations.values().any(|x| x.cols() != sample_count) || sample_count == 0 {
        return Err(ModelError::Invalid(
            "calibration layers disagree on token count".into(),
        ));
    }
    Ok(CalibrationSet {
        activations,
        sample_count,
    })
}
