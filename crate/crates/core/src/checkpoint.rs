//! Binary checkpoint: magic `LMADCKPT`, a JSON model configuration and every
//! parameter and buffer tensor in store order, all little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{Model, ModelConfig};
use crate::tensor::{DType, Element, Tensor, TensorError};

const MAGIC: &[u8; 8] = b"LMADCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint at byte {offset} ({field}): {detail}")]
    Format {
        offset: usize,
        field: &'static str,
        detail: String,
    },
    #[error("checkpoint configuration: {0}")]
    Config(#[from] serde_json::Error),
    #[error("checkpoint does not fit its configuration: {0}")]
    Model(#[from] TensorError),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

fn put_len(out: &mut Vec<u8>, len: usize, max: usize, field: &'static str) -> Result<()> {
    if len > max {
        return Err(CheckpointError::Format {
            offset: out.len(),
            field,
            detail: format!("length {len} exceeds {max}"),
        });
    }
    Ok(())
}

/// Serializes `model` to checkpoint bytes.
pub fn encode<T: Element>(model: &Model<T>) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&model.config)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_len(&mut out, config.len(), u32::MAX as usize, "config length")?;
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, entry) in model.params.iter() {
        put_len(&mut out, name.len(), u16::MAX as usize, "tensor name")?;
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let t = &entry.tensor;
        out.push(T::DTYPE.code());
        put_len(&mut out, t.rank(), u8::MAX as usize, "rank")?;
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, field: &'static str, detail: impl Into<String>) -> CheckpointError {
        CheckpointError::Format {
            offset: self.pos,
            field,
            detail: detail.into(),
        }
    }

    fn take(&mut self, len: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(self.fail(field, format!("truncated: need {len} bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

fn read_values<T: Element, U: Element>(raw: &[u8]) -> Vec<T> {
    raw.chunks_exact(U::DTYPE.size_of()).map(|c| T::from_f64(U::read_le(c).as_f64())).collect()
}

/// Configuration and named tensors from checkpoint bytes. Tensors stored
/// in another precision are converted to `T`.
pub fn decode_parts<T: Element>(bytes: &[u8]) -> Result<(ModelConfig, Vec<(String, Tensor<T>)>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(CheckpointError::Format {
            offset: 0,
            field: "magic",
            detail: "not an LMADCKPT file".into(),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Format {
            offset: 8,
            field: "version",
            detail: format!("unsupported version {version}"),
        });
    }
    let len = r.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len, "config")?)?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u16("tensor name")? as usize;
        let at = r.pos;
        let name = String::from_utf8(r.take(len, "tensor name")?.to_vec()).map_err(|_| CheckpointError::Format {
            offset: at,
            field: "tensor name",
            detail: "invalid UTF-8".into(),
        })?;
        let code = r.u8("dtype")?;
        let dtype = DType::from_code(code).ok_or_else(|| r.fail("dtype", format!("unknown dtype code {code}")))?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let nbytes = numel.and_then(|n| n.checked_mul(dtype.size_of()));
        let Some(nbytes) = nbytes else {
            return Err(r.fail("dims", format!("shape {shape:?} overflows")));
        };
        let raw = r.take(nbytes, "tensor data")?;
        let data = match dtype {
            DType::F32 => read_values::<T, f32>(raw),
            DType::F64 => read_values::<T, f64>(raw),
        };
        let t = Tensor::new(shape, data).map_err(|e| r.fail("dims", format!("`{name}`: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailer", format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
    }
    Ok((config, tensors))
}

pub fn decode<T: Element>(bytes: &[u8]) -> Result<Model<T>> {
    let (config, tensors) = decode_parts(bytes)?;
    Ok(Model::from_tensors(config, tensors)?)
}

pub fn save<T: Element>(model: &Model<T>, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load<T: Element>(path: &Path) -> Result<Model<T>> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}
