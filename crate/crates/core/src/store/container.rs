//! LTEN v1 tensor container.
//!
//! ```text
//! offset 0   "LTEN"
//! offset 4   u32 LE  version (= 1)
//! offset 8   u64 LE  manifest length in bytes
//! offset 16  UTF-8 JSON manifest, space padded so the blob starts 64-byte aligned
//! ...        blob: little-endian tensor payloads, each starting 64-byte aligned
//! ```
//!
//! `byte_offset` in the manifest is relative to the start of the blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::ModelGraph;
use super::{Result, StoreError};

pub const MAGIC: &[u8; 4] = b"LTEN";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::I32(_) => DType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            shape,
            data: TensorData::F32(data),
        }
    }

    pub fn i32(shape: Vec<usize>, data: Vec<i32>) -> Self {
        Self {
            shape,
            data: TensorData::I32(data),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named tensors, iterated in name order.
pub type TensorStore = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub graph: Option<ModelGraph>,
    pub tensors: Vec<TensorEntry>,
}

fn align_up(v: usize) -> usize {
    v.div_ceil(ALIGN) * ALIGN
}

/// Serialize a graph and its tensors to LTEN bytes.
pub fn to_bytes(graph: Option<&ModelGraph>, tensors: &TensorStore) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob = Vec::new();
    for (name, t) in tensors {
        if t.numel() != t.data.len() {
            return Err(StoreError::ShapeMismatch {
                name: name.clone(),
                shape: t.shape.clone(),
                elements: t.data.len(),
            });
        }
        blob.resize(align_up(blob.len()), 0);
        let offset = blob.len();
        t.data.write_le(&mut blob);
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: t.data.dtype(),
            shape: t.shape.clone(),
            byte_offset: offset as u64,
            byte_len: (blob.len() - offset) as u64,
        });
    }
    let manifest = Manifest {
        format: "LTEN".into(),
        version: VERSION,
        graph: graph.cloned(),
        tensors: entries,
    };
    let mut json = serde_json::to_vec(&manifest)?;
    json.resize(align_up(HEADER_LEN + json.len()) - HEADER_LEN, b' ');

    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Parse LTEN bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<(Manifest, TensorStore)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(StoreError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(StoreError::Truncated {
            needed: HEADER_LEN as u64,
            available: bytes.len() as u64,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(StoreError::VersionMismatch { found: version });
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let blob_start = (HEADER_LEN as u64).saturating_add(manifest_len);
    if blob_start > bytes.len() as u64 {
        return Err(StoreError::Truncated {
            needed: blob_start,
            available: bytes.len() as u64,
        });
    }
    let blob_start = blob_start as usize;
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..blob_start])?;
    if manifest.version != version {
        return Err(StoreError::VersionMismatch {
            found: manifest.version,
        });
    }
    let blob = &bytes[blob_start..];

    let mut tensors = TensorStore::new();
    for e in &manifest.tensors {
        let numel: usize = e.shape.iter().product();
        if e.byte_len != (numel * 4) as u64 {
            return Err(StoreError::ShapeMismatch {
                name: e.name.clone(),
                shape: e.shape.clone(),
                elements: (e.byte_len / 4) as usize,
            });
        }
        let end = e
            .byte_offset
            .checked_add(e.byte_len)
            .ok_or(StoreError::Truncated {
                needed: u64::MAX,
                available: blob.len() as u64,
            })?;
        if end > blob.len() as u64 {
            return Err(StoreError::Truncated {
                needed: blob_start as u64 + end,
                available: bytes.len() as u64,
            });
        }
        let raw = &blob[e.byte_offset as usize..end as usize];
        let words = raw
            .chunks_exact(4)
            .map(|c| <[u8; 4]>::try_from(c).expect("4-byte chunk"));
        let data = match e.dtype {
            DType::F32 => TensorData::F32(words.map(f32::from_le_bytes).collect()),
            DType::I32 => TensorData::I32(words.map(i32::from_le_bytes).collect()),
        };
        if tensors
            .insert(
                e.name.clone(),
                Tensor {
                    shape: e.shape.clone(),
                    data,
                },
            )
            .is_some()
        {
            return Err(StoreError::Manifest(format!(
                "duplicate tensor name {}",
                e.name
            )));
        }
    }
    Ok((manifest, tensors))
}

pub fn save(path: &Path, graph: Option<&ModelGraph>, tensors: &TensorStore) -> Result<()> {
    let bytes = to_bytes(graph, tensors)?;
    fs::write(path, bytes).map_err(|e| StoreError::io(path, e))
}

pub fn load(path: &Path) -> Result<(Manifest, TensorStore)> {
    let bytes = fs::read(path).map_err(|e| StoreError::io(path, e))?;
    from_bytes(&bytes)
}
