//! Versioned checkpoint container.
//!
//! Layout (little-endian): `PKGC`, u32 version, u32 metadata length, UTF-8
//! JSON metadata, u32 tensor count, then per tensor: u32 name length, name,
//! u8 element width (4 or 8), u8 rank, rank x u32 dims, raw values.

use std::fs;
use std::path::Path;

use serde_json::Value;

use super::{Model, ModelConfig, ModelError};
use crate::autodiff::Tensor;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PKGC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    /// Free-form JSON; the model config lives under `"model"`.
    pub meta: Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("json value serializes");
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(T::BYTES as u8);
            buf.push(t.shape().len() as u8);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.values() {
                v.write_le(&mut buf);
            }
        }
        buf
    }

    /// Parses a checkpoint, converting stored values to `T`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(bad("missing PKGC header"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(len)?).map_err(|e| bad(&format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
            let width = r.take(1)?[0] as usize;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(width).ok_or_else(|| bad("tensor too large"))?)?;
            let values: Vec<T> = match width {
                4 => raw.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
                8 => raw.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
                w => return Err(bad(&format!("tensor {name}: unsupported element width {w}"))),
            };
            tensors.push((name, Tensor::new(shape, values).map_err(|e| bad(&e.to_string()))?));
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes()).map_err(|source| ModelError::Io { path: path.display().to_string(), source })
    }

    pub fn read(path: &Path) -> Result<Self, ModelError> {
        let bytes = fs::read(path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}

/// Element width (4 or 8) of the first tensor in a checkpoint file.
pub fn stored_width(path: &Path) -> Result<usize, ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
    if !bytes.starts_with(CHECKPOINT_MAGIC) {
        return Err(bad("missing PKGC header"));
    }
    let mut r = Reader { bytes: &bytes, pos: 8 };
    let len = r.u32()? as usize;
    r.take(len)?;
    if r.u32()? == 0 {
        return Ok(8);
    }
    let len = r.u32()? as usize;
    r.take(len)?;
    Ok(r.take(1)?[0] as usize)
}

fn bad(msg: &str) -> ModelError {
    ModelError::Checkpoint(msg.to_string())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl<T: Scalar> Model<T> {
    /// Parameters plus config, with `extra` merged into the metadata.
    pub fn to_checkpoint(&self, extra: serde_json::Map<String, Value>) -> Checkpoint<T> {
        let mut meta = extra;
        meta.insert("model".into(), serde_json::to_value(self.config()).expect("config serializes"));
        meta.insert("dtype".into(), Value::String(T::NAME.into()));
        let tensors = self.params.iter().map(|(n, t)| (format!("param/{n}"), strip(t))).collect();
        Checkpoint { meta: Value::Object(meta), tensors }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self, ModelError> {
        let config: ModelConfig = ckpt
            .meta
            .get("model")
            .cloned()
            .ok_or_else(|| bad("no model config"))
            .and_then(|v| serde_json::from_value(v).map_err(|e| bad(&format!("model config: {e}"))))?;
        let mut model = Model::new(config, 0)?;
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let name = format!("param/{}", model.params.name(id));
            let stored = ckpt.tensor(&name).ok_or_else(|| bad(&format!("missing tensor {name}")))?;
            let slot = model.params.get_mut(id);
            if stored.shape() != slot.shape() {
                return Err(bad(&format!("tensor {name} has shape {:?}, model expects {:?}", stored.shape(), slot.shape())));
            }
            slot.values_mut().copy_from_slice(stored.values());
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        self.to_checkpoint(serde_json::Map::new()).write(path)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}

fn strip<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    Tensor::new(t.shape().to_vec(), t.values().to_vec()).expect("same shape")
}
