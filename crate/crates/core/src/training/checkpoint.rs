//! Binary checkpoint: the 8-byte magic `TRCAPS01`, a one-line JSON
//! manifest terminated by `\n`, then little-endian tensor payloads in
//! directory order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::ast::Vocabulary;
use crate::model::{ModelConfig, NamedTensor, TreeCaps};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"TRCAPS01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    Magic,
    #[error("unsupported checkpoint format version {found}; this build reads version {expected}")]
    Version { found: u64, expected: u32 },
    #[error("corrupt manifest: {0}")]
    Manifest(String),
    #[error("tensor {name}: {message}")]
    Tensor { name: String, message: String },
    #[error("checkpoint is truncated: {0}")]
    Truncated(String),
    #[error("incompatible model: {0}")]
    Model(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
    classes: Vec<String>,
    vocabulary: Vocabulary,
    validation_accuracy: Option<f64>,
    train: Option<TrainConfig>,
    tensors: Vec<TensorEntry>,
}

/// A trained model plus what is needed to use and compare it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: TreeCaps<f32>,
    pub class_names: Vec<String>,
    pub validation_accuracy: Option<f64>,
    pub train: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        for p in self.model.params() {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                dtype: f32::DTYPE,
                offset: payload.len(),
            });
            for x in p.tensor.data() {
                x.write_le(&mut payload);
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            model: self.model.config().clone(),
            classes: self.class_names.clone(),
            vocabulary: self.model.vocab().clone(),
            validation_accuracy: self.validation_accuracy,
            train: self.train.clone(),
            tensors,
        };
        let mut out = MAGIC.to_vec();
        out.extend(serde_json::to_vec(&manifest).expect("serializable"));
        out.push(b'\n');
        out.extend(payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let rest = &bytes[MAGIC.len()..];
        let end = rest
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| CheckpointError::Truncated("manifest is not terminated".into()))?;
        let (header, payload) = (&rest[..end], &rest[end + 1..]);

        let raw: serde_json::Value =
            serde_json::from_slice(header).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let version = raw
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| CheckpointError::Manifest("missing format_version".into()))?;
        if version != u64::from(FORMAT_VERSION) {
            return Err(CheckpointError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let manifest: Manifest =
            serde_json::from_value(raw).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        manifest.model.validate().map_err(CheckpointError::Model)?;

        let classes = manifest.classes.len();
        let expected = manifest
            .model
            .param_shapes(manifest.vocabulary.len(), classes);
        if expected.len() != manifest.tensors.len() {
            return Err(CheckpointError::Manifest(format!(
                "expected {} tensors, directory lists {}",
                expected.len(),
                manifest.tensors.len()
            )));
        }
        let mut params = Vec::with_capacity(expected.len());
        let mut cursor = 0usize;
        for ((name, shape), entry) in expected.iter().zip(&manifest.tensors) {
            let fail = |message: String| CheckpointError::Tensor {
                name: entry.name.clone(),
                message,
            };
            if *name != entry.name {
                return Err(fail(format!("expected tensor {name} at this position")));
            }
            if *shape != entry.shape {
                return Err(fail(format!(
                    "shape {:?} does not match the model's {shape:?}",
                    entry.shape
                )));
            }
            if entry.offset != cursor {
                return Err(fail(format!(
                    "offset {} out of order (expected {cursor})",
                    entry.offset
                )));
            }
            let count: usize = shape.iter().product();
            let width = entry.dtype.size_of();
            let len = count * width;
            let bytes = payload.get(cursor..cursor + len).ok_or_else(|| {
                CheckpointError::Truncated(format!(
                    "tensor {} needs {len} bytes at offset {cursor}, payload has {}",
                    entry.name,
                    payload.len()
                ))
            })?;
            let data: Vec<f32> = match entry.dtype {
                DType::F32 => bytes.chunks_exact(width).map(f32::read_le).collect(),
                DType::F64 => bytes
                    .chunks_exact(width)
                    .map(|c| f64::read_le(c) as f32)
                    .collect(),
            };
            if let Some(i) = data.iter().position(|x| !x.is_finite()) {
                return Err(fail(format!("non-finite value at coordinate {i}")));
            }
            cursor += len;
            params.push(NamedTensor {
                name: entry.name.clone(),
                tensor: Tensor::new(shape.clone(), data).map_err(|e| fail(e.to_string()))?,
            });
        }
        if cursor != payload.len() {
            return Err(CheckpointError::Manifest(format!(
                "{} trailing payload bytes",
                payload.len() - cursor
            )));
        }
        let model = TreeCaps::from_params(manifest.model, manifest.vocabulary, classes, params)
            .map_err(CheckpointError::Model)?;
        Ok(Self {
            model,
            class_names: manifest.classes,
            validation_accuracy: manifest.validation_accuracy,
            train: manifest.train,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        crate::io::write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
