//! Flat binary parameter container.
//!
//! ```text
//! "ILR1"                      4-byte magic
//! u8                          element width in bytes (4 = f32, 8 = f64)
//! u64 len, [u8; len]          header JSON (model config, strategy, step, seq_len)
//! u64 count                   number of tensors, then per tensor:
//!   u64 len, [u8; len]        name (UTF-8)
//!   u64 rank, [u64; rank]     extents
//!   [elem; Π extents]         little-endian elements
//! ```
//! All integers are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelConfig, ModelError, ModelParams};
use crate::recurrence::RecurrenceStrategy;
use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 4] = b"ILR1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported element width {0}")]
    UnsupportedWidth(u8),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("tensor {index} is named {found:?}, expected {expected:?}")]
    NameMismatch {
        index: usize,
        expected: String,
        found: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Everything besides the tensors that a checkpoint records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub strategy: RecurrenceStrategy,
    /// Sequence length the model was trained at.
    pub seq_len: usize,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: usize,
}

/// Parameters in whichever precision the file stores.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredParams {
    F32(ModelParams<f32>),
    F64(ModelParams<f64>),
}

impl StoredParams {
    pub fn to_precision<F: Float>(&self) -> ModelParams<F> {
        match self {
            StoredParams::F32(p) => p.cast(),
            StoredParams::F64(p) => p.cast(),
        }
    }
}

pub fn encode<F: Float>(meta: &CheckpointMeta, params: &ModelParams<F>) -> Result<Vec<u8>, CheckpointError> {
    let header = serde_json::to_vec(meta)?;
    let mut out = Vec::with_capacity(params.param_count() * F::BYTES + header.len() + 64);
    out.extend_from_slice(MAGIC);
    out.push(F::BYTES as u8);
    put_u64(&mut out, header.len() as u64);
    out.extend_from_slice(&header);
    let named = params.named_tensors();
    put_u64(&mut out, named.len() as u64);
    for (name, t) in named {
        put_u64(&mut out, name.len() as u64);
        out.extend_from_slice(name.as_bytes());
        put_u64(&mut out, t.rank() as u64);
        for &e in t.shape() {
            put_u64(&mut out, e as u64);
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(CheckpointMeta, StoredParams), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let width = r.take(1, "element width")?[0];
    let header_len = r.u64("header length")? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(header_len, "header")?)?;
    let params = match width {
        4 => StoredParams::F32(read_tensors(&mut r, &meta.model)?),
        8 => StoredParams::F64(read_tensors(&mut r, &meta.model)?),
        w => return Err(CheckpointError::UnsupportedWidth(w)),
    };
    Ok((meta, params))
}

fn read_tensors<F: Float>(r: &mut Reader<'_>, config: &ModelConfig) -> Result<ModelParams<F>, CheckpointError> {
    let expected = ModelParams::<F>::param_infos(config);
    let count = r.u64("tensor count")? as usize;
    if count != expected.len() {
        return Err(ModelError::ParamMismatch(format!("expected {} tensors, file has {count}", expected.len())).into());
    }
    let mut tensors = Vec::with_capacity(count);
    for (index, info) in expected.iter().enumerate() {
        let name_len = r.u64("name length")? as usize;
        let name = String::from_utf8_lossy(r.take(name_len, "name")?).into_owned();
        if name != info.name {
            return Err(CheckpointError::NameMismatch {
                index,
                expected: info.name.clone(),
                found: name,
            });
        }
        let rank = r.u64("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(F::BYTES).ok_or(CheckpointError::Truncated("elements"))?, "elements")?;
        let data = raw.chunks_exact(F::BYTES).map(F::read_le).collect();
        tensors.push(Tensor::new(shape, data).map_err(ModelError::from)?);
    }
    Ok(ModelParams::from_tensors(config, tensors)?)
}

pub fn save<F: Float>(path: &Path, meta: &CheckpointMeta, params: &ModelParams<F>) -> Result<(), CheckpointError> {
    let bytes = encode(meta, params)?;
    std::fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<(CheckpointMeta, StoredParams), CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}
