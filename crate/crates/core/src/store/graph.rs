use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::container::{Tensor, TensorData, TensorStore};
use super::{Result, StoreError};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    MlpFc1,
    MlpFc2,
    Embed,
    Head,
}

impl LayerKind {
    /// Whether the layer takes part in compression. Embedding and head stay dense.
    pub fn compressible(self) -> bool {
        !matches!(self, LayerKind::Embed | LayerKind::Head)
    }

    pub fn is_attention(self) -> bool {
        matches!(
            self,
            LayerKind::AttnQ | LayerKind::AttnK | LayerKind::AttnV | LayerKind::AttnO
        )
    }
}

/// Compressed storage parameters of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCompression {
    pub rank: usize,
    /// Kept columns per row chunk.
    pub kept: usize,
    pub granularity: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    pub rows: usize,
    pub cols: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compression: Option<LayerCompression>,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, kind: LayerKind, rows: usize, cols: usize) -> Self {
        Self {
            id: id.into(),
            kind,
            rows,
            cols,
            compression: None,
        }
    }

    pub fn params(&self) -> usize {
        self.rows * self.cols
    }

    /// Tensor names that hold this layer's weights, with their expected shapes.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        match self.compression {
            None => vec![(weight_name(&self.id), vec![self.rows, self.cols])],
            Some(c) => vec![
                (format!("{}.a", self.id), vec![self.rows, c.rank]),
                (format!("{}.b", self.id), vec![c.rank, self.cols]),
                (format!("{}.s.values", self.id), vec![self.rows, c.kept]),
                (
                    format!("{}.s.index", self.id),
                    vec![self.rows.div_ceil(c.granularity.max(1)), c.kept],
                ),
            ],
        }
    }
}

/// Layer ids of one Transformer block, split into its attention and MLP groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGroup {
    pub attn: Vec<String>,
    pub mlp: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub layers: Vec<LayerSpec>,
    pub blocks: Vec<BlockGroup>,
    pub hidden_size: usize,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

pub fn weight_name(id: &str) -> String {
    format!("{id}.weight")
}

impl ModelGraph {
    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn layer_mut(&mut self, id: &str) -> Option<&mut LayerSpec> {
        self.layers.iter_mut().find(|l| l.id == id)
    }

    /// Compressible layers in graph order.
    pub fn compressible(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.kind.compressible())
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta_str(key)
            .ok_or_else(|| StoreError::Graph(format!("meta key {key} missing")))?
            .parse()
            .map_err(|_| StoreError::Graph(format!("meta key {key} is not a count")))
    }

    /// Structural checks: unique ids, positive shapes, and each layer either in
    /// exactly one block group or of kind embed/head.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for l in &self.layers {
            if !seen.insert(l.id.as_str()) {
                return Err(StoreError::Graph(format!("duplicate layer id {}", l.id)));
            }
            if l.rows == 0 || l.cols == 0 {
                return Err(StoreError::Graph(format!(
                    "layer {} has an empty shape",
                    l.id
                )));
            }
        }
        let mut membership: BTreeMap<&str, usize> = BTreeMap::new();
        for b in &self.blocks {
            for id in b.attn.iter().chain(&b.mlp) {
                if !seen.contains(id.as_str()) {
                    return Err(StoreError::Graph(format!(
                        "block references unknown layer {id}"
                    )));
                }
                *membership.entry(id.as_str()).or_default() += 1;
            }
        }
        for l in &self.layers {
            let count = membership.get(l.id.as_str()).copied().unwrap_or(0);
            let ok = if l.kind.compressible() {
                count == 1
            } else {
                count == 0
            };
            if !ok {
                return Err(StoreError::Graph(format!(
                    "layer {} belongs to {count} block groups",
                    l.id
                )));
            }
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus presence and shape of every weight tensor.
    pub fn check_tensors(&self, tensors: &TensorStore) -> Result<()> {
        self.validate()?;
        for l in &self.layers {
            for (name, shape) in l.tensor_shapes() {
                let t = tensors
                    .get(&name)
                    .ok_or_else(|| StoreError::MissingTensor(name.clone()))?;
                if t.shape != shape {
                    return Err(StoreError::ShapeMismatch {
                        name,
                        shape: t.shape.clone(),
                        elements: shape.iter().product(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Store a matrix as a 2-D `f32` tensor.
pub fn matrix_to_tensor<T: Scalar>(m: &Matrix<T>) -> Tensor {
    Tensor::f32(
        vec![m.rows(), m.cols()],
        m.data()
            .iter()
            .map(|v| v.to_f32().unwrap_or(f32::NAN))
            .collect(),
    )
}

/// Read a 2-D `f32` tensor.
pub fn tensor_to_matrix<T: Scalar>(name: &str, t: &Tensor) -> Result<Matrix<T>> {
    let TensorData::F32(v) = &t.data else {
        return Err(StoreError::DType {
            name: name.into(),
            expected: "f32",
        });
    };
    let (rows, cols) = match t.shape.as_slice() {
        [r, c] => (*r, *c),
        [n] => (*n, 1),
        _ => {
            return Err(StoreError::ShapeMismatch {
                name: name.into(),
                shape: t.shape.clone(),
                elements: v.len(),
            })
        }
    };
    Matrix::from_vec(rows, cols, v.iter().map(|&x| T::of(x as f64)).collect()).map_err(|_| {
        StoreError::ShapeMismatch {
            name: name.into(),
            shape: t.shape.clone(),
            elements: v.len(),
        }
    })
}

pub fn get_matrix<T: Scalar>(tensors: &TensorStore, name: &str) -> Result<Matrix<T>> {
    let t = tensors
        .get(name)
        .ok_or_else(|| StoreError::MissingTensor(name.into()))?;
    tensor_to_matrix(name, t)
}

/// Read a 1-D or 2-D `i32` tensor as non-negative indices.
pub fn get_indices(tensors: &TensorStore, name: &str) -> Result<(Vec<usize>, Vec<usize>)> {
    let t = tensors
        .get(name)
        .ok_or_else(|| StoreError::MissingTensor(name.into()))?;
    let TensorData::I32(v) = &t.data else {
        return Err(StoreError::DType {
            name: name.into(),
            expected: "i32",
        });
    };
    let idx = v
        .iter()
        .map(|&x| {
            usize::try_from(x).map_err(|_| StoreError::Graph(format!("negative index in {name}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((t.shape.clone(), idx))
}
