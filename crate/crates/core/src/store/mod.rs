//! Tensor container, model manifest and calibration activations.

mod calibration;
mod container;
mod graph;

pub use calibration::{
    calibration_from_store, calibration_to_store, collect_calibration, CalibrationSet,
};
pub use container::{
    from_bytes, load, save, to_bytes, DType, Manifest, Tensor, TensorData, TensorEntry,
    TensorStore, ALIGN, MAGIC, VERSION,
};
pub use graph::{
    get_indices, get_matrix, matrix_to_tensor, tensor_to_matrix, weight_name, BlockGroup,
    LayerCompression, LayerKind, LayerSpec, ModelGraph,
};

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("bad magic: not an LTEN container")]
    BadMagic,
    #[error("unsupported LTEN version {found} (expected 1)")]
    VersionMismatch { found: u32 },
    #[error("truncated container: need {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("tensor {name}: shape {shape:?} disagrees with {elements} stored elements")]
    ShapeMismatch {
        name: String,
        shape: Vec<usize>,
        elements: usize,
    },
    #[error("tensor {name}: expected dtype {expected}")]
    DType {
        name: String,
        expected: &'static str,
    },
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("invalid model graph: {0}")]
    Graph(String),
}

impl StoreError {
    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        StoreError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for StoreError {
    fn from(e: serde_json::Error) -> Self {
        StoreError::Manifest(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, StoreError>;

/// Write a model graph and its tensors.
pub fn save_model(path: &Path, graph: &ModelGraph, tensors: &TensorStore) -> Result<()> {
    graph.check_tensors(tensors)?;
    save(path, Some(graph), tensors)
}

/// Read a model graph and its tensors, checking them against each other.
pub fn load_model(path: &Path) -> Result<(ModelGraph, TensorStore)> {
    let (manifest, tensors) = load(path)?;
    let graph = manifest
        .graph
        .ok_or_else(|| StoreError::Manifest("container has no model graph".into()))?;
    graph.check_tensors(&tensors)?;
    Ok((graph, tensors))
}
