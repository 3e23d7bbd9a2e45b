use std::collections::BTreeMap;

use super::vit::{block_op_id, LayerNorm, ToyViT, VitBlock, VitDims, BLOCK_OPS};
use super::{LinearChain, LinearOp, Model, ModelError, Result};
use crate::decompose::{Decomposition, StructuredSparse};
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::store::{
    get_indices, get_matrix, matrix_to_tensor, weight_name, BlockGroup, LayerCompression,
    LayerKind, LayerSpec, ModelGraph, StoreError, Tensor, TensorData, TensorStore,
};

fn kind_of(id: &str) -> LayerKind {
    match id.rsplit('.').next() {
        Some("q") => LayerKind::AttnQ,
        Some("k") => LayerKind::AttnK,
        Some("v") => LayerKind::AttnV,
        Some("o") => LayerKind::AttnO,
        Some("fc1") => LayerKind::MlpFc1,
        Some("fc2") => LayerKind::MlpFc2,
        _ if id == "embed" => LayerKind::Embed,
        _ => LayerKind::Head,
    }
}

fn spec_of<T: Scalar>(id: &str, kind: LayerKind, op: &LinearOp<T>) -> LayerSpec {
    let (rows, cols) = op.shape();
    let mut spec = LayerSpec::new(id, kind, rows, cols);
    if let LinearOp::Compressed(d) = op {
        spec.compression = Some(LayerCompression {
            rank: d.rank,
            kept: d.sparse.kept(),
            granularity: d.sparse.granularity,
        });
    }
    spec
}

pub(super) fn graph_of<T: Scalar>(model: &Model<T>) -> ModelGraph {
    match model {
        Model::Vit(m) => {
            let d = m.dims;
            let layers = m
                .ops()
                .into_iter()
                .map(|(id, op)| {
                    let kind = kind_of(&id);
                    spec_of(&id, kind, op)
                })
                .collect();
            let blocks = (0..m.blocks.len())
                .map(|b| BlockGroup {
                    attn: BLOCK_OPS[..4].iter().map(|n| block_op_id(b, n)).collect(),
                    mlp: BLOCK_OPS[4..].iter().map(|n| block_op_id(b, n)).collect(),
                })
                .collect();
            let meta = BTreeMap::from([
                ("arch".to_string(), "vit".to_string()),
                ("input_dim".to_string(), d.input_dim.to_string()),
                ("heads".to_string(), d.heads.to_string()),
                ("mlp_ratio".to_string(), d.mlp_ratio.to_string()),
                ("blocks".to_string(), d.blocks.to_string()),
                ("classes".to_string(), d.classes.to_string()),
                ("seq_len".to_string(), d.seq_len.to_string()),
            ]);
            ModelGraph {
                layers,
                blocks,
                hidden_size: d.hidden,
                meta,
            }
        }
        Model::Chain(c) => {
            let layers: Vec<LayerSpec> = c
                .layers
                .iter()
                .map(|(id, op)| spec_of(id, LayerKind::MlpFc1, op))
                .collect();
            let blocks = layers
                .iter()
                .map(|l| BlockGroup {
                    attn: vec![],
                    mlp: vec![l.id.clone()],
                })
                .collect();
            let hidden = layers.first().map(|l| l.rows).unwrap_or(0);
            ModelGraph {
                layers,
                blocks,
                hidden_size: hidden,
                meta: BTreeMap::from([("arch".to_string(), "linear_chain".to_string())]),
            }
        }
    }
}

fn put_op<T: Scalar>(tensors: &mut TensorStore, id: &str, op: &LinearOp<T>) {
    match op {
        LinearOp::Dense(w) => {
            tensors.insert(weight_name(id), matrix_to_tensor(w));
        }
        LinearOp::Compressed(d) => {
            tensors.insert(format!("{id}.a"), matrix_to_tensor(&d.a));
            tensors.insert(format!("{id}.b"), matrix_to_tensor(&d.b));
            tensors.insert(
                format!("{id}.s.values"),
                matrix_to_tensor(&d.sparse.stacked_values()),
            );
            let table = d.sparse.index_table();
            let rows = table.len();
            let flat: Vec<i32> = table
                .into_iter()
                .flatten()
                .map(|c| i32::try_from(c).expect("column index fits in i32"))
                .collect();
            tensors.insert(
                format!("{id}.s.index"),
                Tensor::i32(vec![rows, d.sparse.kept()], flat),
            );
        }
    }
}

fn put_norm<T: Scalar>(tensors: &mut TensorStore, prefix: &str, ln: &LayerNorm<T>) {
    let v = |x: &[T]| {
        x.iter()
            .map(|v| v.to_f32().unwrap_or(f32::NAN))
            .collect::<Vec<_>>()
    };
    tensors.insert(
        format!("{prefix}.gamma"),
        Tensor::f32(vec![ln.gamma.len()], v(&ln.gamma)),
    );
    tensors.insert(
        format!("{prefix}.beta"),
        Tensor::f32(vec![ln.beta.len()], v(&ln.beta)),
    );
}

pub(super) fn model_to_store<T: Scalar>(model: &Model<T>) -> (ModelGraph, TensorStore) {
    let graph = graph_of(model);
    let mut tensors = TensorStore::new();
    for (id, op) in model.ops() {
        put_op(&mut tensors, &id, op);
    }
    if let Model::Vit(m) = model {
        for (b, blk) in m.blocks.iter().enumerate() {
            put_norm(&mut tensors, &format!("blocks.{b}.ln1"), &blk.ln1);
            put_norm(&mut tensors, &format!("blocks.{b}.ln2"), &blk.ln2);
        }
        put_norm(&mut tensors, "norm", &m.norm);
    }
    (graph, tensors)
}

/// Builds the operator for one layer. Sparse indices are range-checked only
/// when used, so a damaged index table still loads and can be diagnosed.
fn get_op<T: Scalar>(spec: &LayerSpec, tensors: &TensorStore) -> Result<LinearOp<T>> {
    let id = &spec.id;
    match spec.compression {
        None => Ok(LinearOp::Dense(get_matrix(tensors, &weight_name(id))?)),
        Some(c) => {
            let a: Matrix<T> = get_matrix(tensors, &format!("{id}.a"))?;
            let b: Matrix<T> = get_matrix(tensors, &format!("{id}.b"))?;
            let values: Matrix<T> = get_matrix(tensors, &format!("{id}.s.values"))?;
            let (shape, flat) = get_indices(tensors, &format!("{id}.s.index"))?;
            let per_row = shape.get(1).copied().unwrap_or(0);
            let table: Vec<Vec<usize>> = if per_row == 0 {
                vec![Vec::new(); shape.first().copied().unwrap_or(0)]
            } else {
                flat.chunks(per_row).map(<[usize]>::to_vec).collect()
            };
            let sparse = StructuredSparse::from_stacked(&values, table, c.granularity, spec.cols)?;
            Ok(LinearOp::Compressed(Decomposition {
                a,
                b,
                sparse,
                rank: c.rank,
                objective_trace: Vec::new(),
                best_objective: T::zero(),
            }))
        }
    }
}

fn get_vec<T: Scalar>(tensors: &TensorStore, name: &str) -> Result<Vec<T>> {
    let t = tensors
        .get(name)
        .ok_or_else(|| StoreError::MissingTensor(name.to_string()))?;
    match &t.data {
        TensorData::F32(v) => Ok(v.iter().map(|&x| T::of(x as f64)).collect()),
        TensorData::I32(_) => Err(StoreError::DType {
            name: name.to_string(),
            expected: "f32",
        }
        .into()),
    }
}

fn get_norm<T: Scalar>(tensors: &TensorStore, prefix: &str, n: usize) -> Result<LayerNorm<T>> {
    let gamma = get_vec(tensors, &format!("{prefix}.gamma"))?;
    let beta = get_vec(tensors, &format!("{prefix}.beta"))?;
    if gamma.len() != n || beta.len() != n {
        return Err(ModelError::Invalid(format!(
            "{prefix}: layer norm width differs from {n}"
        )));
    }
    Ok(LayerNorm { gamma, beta })
}

pub(super) fn model_from_store<T: Scalar>(
    graph: &ModelGraph,
    tensors: &TensorStore,
) -> Result<Model<T>> {
    graph.check_tensors(tensors)?;
    let op = |id: &str| -> Result<LinearOp<T>> {
        let spec = graph
            .layer(id)
            .ok_or_else(|| ModelError::Invalid(format!("graph has no layer {id}")))?;
        get_op(spec, tensors)
    };
    match graph.meta_str("arch") {
        Some("vit") => {
            let dims = VitDims {
                input_dim: graph.meta_usize("input_dim")?,
                hidden: graph.hidden_size,
                heads: graph.meta_usize("heads")?,
                mlp_ratio: graph.meta_usize("mlp_ratio")?,
                blocks: graph.meta_usize("blocks")?,
                classes: graph.meta_usize("classes")?,
                seq_len: graph.meta_usize("seq_len")?,
            };
            dims.validate()?;
            let h = dims.hidden;
            let blocks = (0..dims.blocks)
                .map(|b| {
                    let o = |n: &str| op(&block_op_id(b, n));
                    Ok(VitBlock {
                        ln1: get_norm(tensors, &format!("blocks.{b}.ln1"), h)?,
                        q: o("attn.q")?,
                        k: o("attn.k")?,
                        v: o("attn.v")?,
                        o: o("attn.o")?,
                        ln2: get_norm(tensors, &format!("blocks.{b}.ln2"), h)?,
                        fc1: o("mlp.fc1")?,
                        fc2: o("mlp.fc2")?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let model = ToyViT {
                dims,
                embed: op("embed")?,
                blocks,
                norm: get_norm(tensors, "norm", h)?,
                head: op("head")?,
            };
            Ok(Model::Vit(model))
        }
        Some("linear_chain") => {
            let layers = graph
                .layers
                .iter()
                .map(|l| Ok((l.id.clone(), get_op(l, tensors)?)))
                .collect::<Result<Vec<_>>>()?;
            for w in layers.windows(2) {
                if w[1].1.shape().1 != w[0].1.shape().0 {
                    return Err(ModelError::Shape {
                        layer: w[1].0.clone(),
                        expected: w[1].1.shape().1,
                        got: w[0].1.shape().0,
                    });
                }
            }
            Ok(Model::Chain(LinearChain { layers }))
        }
        other => Err(ModelError::Invalid(format!(
            "unknown architecture {other:?}"
        ))),
    }
}

/// Classification samples: `inputs` is `input_dim x (samples · tokens_per_sample)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub inputs: Matrix<T>,
    pub labels: Vec<usize>,
}

pub fn dataset_to_store<T: Scalar>(ds: &Dataset<T>) -> TensorStore {
    let mut t = TensorStore::new();
    t.insert("inputs".into(), matrix_to_tensor(&ds.inputs));
    t.insert(
        "labels".into(),
        Tensor::i32(
            vec![ds.labels.len()],
            ds.labels
                .iter()
                .map(|&l| i32::try_from(l).expect("label fits in i32"))
                .collect(),
        ),
    );
    t
}

pub fn dataset_from_store<T: Scalar>(tensors: &TensorStore) -> Result<Dataset<T>> {
    let inputs = get_matrix(tensors, "inputs")?;
    let (_, labels) = get_indices(tensors, "labels")?;
    Ok(Dataset { inputs, labels })
}
