//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MAEC"  u32 version
//! u64 metadata length, UTF-8 JSON metadata
//! u32 tensor count
//! per tensor: u32 name length, name bytes, u8 dtype tag, u32 rank,
//!             rank × u64 dims, raw element data
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::{DType, Real, Tensor};
use crate::training::{MetricRecord, TrainConfig};
use crate::vit::ModelConfig;
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MAEC";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0} (this build reads version {VERSION})")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),
    #[error("checkpoint metadata is invalid: {0}")]
    Metadata(String),
    #[error("unknown dtype tag {tag} for tensor {name}")]
    BadDtype { name: String, tag: u8 },
    #[error("malformed tensor {name}: {reason}")]
    BadTensor { name: String, reason: String },
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
}

/// Which model a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Encoder and MAE decoder.
    Mae,
    /// Encoder and regression head.
    Regressor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    /// Root seed; every random stream is a function of it and (epoch, sample).
    pub seed: u64,
    pub history: Vec<MetricRecord>,
    pub best_epoch: Option<usize>,
    /// Resolved run configuration text, when written by the command line tool.
    pub run_config: Option<String>,
}

impl CheckpointMeta {
    pub fn new(kind: ModelKind, model: ModelConfig, seed: u64) -> Self {
        CheckpointMeta {
            kind,
            model,
            train: None,
            epoch: 0,
            step: 0,
            seed,
            history: Vec::new(),
            best_epoch: None,
            run_config: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn from_real<T: Real>(values: &[T]) -> Self {
        match T::DTYPE {
            DType::F32 => TensorData::F32(values.iter().map(|v| v.f64() as f32).collect()),
            DType::F64 => TensorData::F64(values.iter().map(|v| v.f64()).collect()),
        }
    }

    /// Values converted to `T`; exact when the stored dtype is `T`.
    pub fn to_real<T: Real>(&self) -> Vec<T> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| T::of(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        NamedTensor { name: name.into(), shape: t.shape().to_vec(), data: TensorData::from_real(t.data()) }
    }

    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        Ok(Tensor::new(&self.shape, self.data.to_real())?)
    }
}

/// Prefix of the weights selected by validation when they differ from the final ones.
pub const BEST: &str = "best.";
/// Prefix of optimizer first-moment tensors.
pub const OPT_M: &str = "opt.m.";
/// Prefix of optimizer second-moment tensors.
pub const OPT_V: &str = "opt.v.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Checkpoint { meta, tensors: Vec::new() }
    }

    pub fn push<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push(NamedTensor::from_tensor(name, t));
    }

    /// Appends every parameter tensor of `store` under its own name.
    pub fn push_store<T: Real>(&mut self, store: &ParamStore<T>) {
        for (_, p) in store.iter() {
            self.push(p.name.clone(), &p.value);
        }
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.iter().any(|t| t.name.starts_with(prefix))
    }

    /// Model tensors (optimizer moments and selected copies excluded) as a parameter store.
    pub fn params<T: Real>(&self) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for t in self.tensors.iter().filter(|t| !t.name.starts_with("opt.") && !t.name.starts_with(BEST)) {
            store.add(t.name.clone(), t.to_tensor()?, crate::params::ParamKind::NoDecay);
        }
        Ok(store)
    }

    /// Tensors named `<prefix><name>`, returned under `<name>`.
    pub fn params_with_prefix<T: Real>(&self, prefix: &str) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for t in &self.tensors {
            if let Some(name) = t.name.strip_prefix(prefix) {
                store.add(name.to_string(), t.to_tensor()?, crate::params::ParamKind::NoDecay);
            }
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        let mut out = Vec::with_capacity(64 + meta.len() + self.tensors.iter().map(|t| t.data.len() * 8).sum::<usize>());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let expected: usize = t.shape.iter().product();
            if expected != t.data.len() {
                return Err(CheckpointError::BadTensor {
                    name: t.name.clone(),
                    reason: format!("shape {:?} holds {expected} values, data has {}", t.shape, t.data.len()),
                }
                .into());
            }
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.data.dtype().tag());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let meta_len = r.u64("metadata length")? as usize;
        let meta = r.take(meta_len, "metadata")?;
        let meta: CheckpointMeta =
            serde_json::from_slice(meta).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let name_len = r.u32("tensor name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
                .map_err(|_| CheckpointError::BadTensor { name: format!("#{i}"), reason: "name is not UTF-8".into() })?;
            let tag = r.take(1, "dtype tag")?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| CheckpointError::BadDtype { name: name.clone(), tag })?;
            let rank = r.u32("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u64("tensor dims")? as usize);
            }
            let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| {
                CheckpointError::BadTensor { name: name.clone(), reason: format!("shape {shape:?} overflows") }
            })?;
            if rank == 0 || n == 0 {
                return Err(CheckpointError::BadTensor { name, reason: format!("empty shape {shape:?}") });
            }
            let raw = r.take(n.saturating_mul(dtype.size()), &format!("data of tensor {name}"))?;
            let data = match dtype {
                DType::F32 => TensorData::F32(raw.chunks_exact(4).map(f32::read_le).collect()),
                DType::F64 => TensorData::F64(raw.chunks_exact(8).map(f64::read_le).collect()),
            };
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Checkpoint { meta, tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Truncated(what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ck.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}
