//! Binary container shared by model and training checkpoints.
//!
//! Layout (little-endian): `b"SCRP"`, `u32` version, `u32` metadata length, metadata JSON,
//! `u32` tensor count, then per tensor `u32` ndim, `ndim x u32` dims and the f32 payload,
//! and finally a CRC32 of every preceding byte.

use std::path::Path;

use serde_json::Value;

use super::{Architecture, Model};
use crate::autodiff::Tensor;
use crate::error::{CheckpointError, Error, Result};

const MAGIC: &[u8; 4] = b"SCRP";
const VERSION: u32 = 1;

pub fn encode_container(meta: &Value, tensors: &[&Tensor<f32>]) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(meta)?;
    let mut out = Vec::with_capacity(64 + meta.len() + tensors.iter().map(|t| 8 + 4 * t.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, len_u32(meta.len())?);
    out.extend_from_slice(&meta);
    put_u32(&mut out, len_u32(tensors.len())?);
    for t in tensors {
        put_u32(&mut out, len_u32(t.shape().len())?);
        for &d in t.shape() {
            put_u32(&mut out, len_u32(d)?);
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<(Value, Vec<Tensor<f32>>)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated.into());
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version).into());
    }
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Crc { stored, computed }.into());
    }
    let meta_len = r.u32()? as usize;
    let meta: Value = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| CheckpointError::Metadata(e.to_string()))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or(CheckpointError::Truncated)?;
        let raw = r.take(n)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Metadata("trailing bytes before CRC".into()).into());
    }
    Ok((meta, tensors))
}

pub fn write_container(path: &Path, meta: &Value, tensors: &[&Tensor<f32>]) -> Result<()> {
    let bytes = encode_container(meta, tensors)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    // Write then rename so an interrupted save never leaves a torn file in place.
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

pub fn read_container(path: &Path) -> Result<(Value, Vec<Tensor<f32>>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_container(&bytes)
}

impl Model<f32> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::json!({ "kind": "model", "architecture": self.arch });
        encode_container(&meta, &self.params.iter().collect::<Vec<_>>())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, tensors) = decode_container(bytes)?;
        Self::from_container(meta, tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "kind": "model", "architecture": self.arch });
        write_container(path, &meta, &self.params.iter().collect::<Vec<_>>())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = read_container(path)?;
        Self::from_container(meta, tensors)
    }

    /// Accepts both plain model files and training checkpoints; the latter store the model
    /// parameters first.
    pub(crate) fn from_container(meta: Value, mut tensors: Vec<Tensor<f32>>) -> Result<Self> {
        let arch: Architecture = serde_json::from_value(
            meta.get("architecture").cloned().ok_or_else(|| CheckpointError::Metadata("missing architecture".into()))?,
        )
        .map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        let n = arch.param_shapes().len();
        if tensors.len() < n {
            return Err(CheckpointError::Metadata(format!("expected {n} parameter tensors, found {}", tensors.len())).into());
        }
        tensors.truncate(n);
        Model::from_params(arch, tensors)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("length {n} exceeds checkpoint limits")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
