//! The JETF checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic    4 bytes  "JETF"
//! version  u32
//! step     u64
//! config   u64 length, then UTF-8 TOML text
//! count    u32 number of tensors
//! tensor   u32 name length, name bytes, u8 dtype code (1 = f32, 2 = f64),
//!          u32 rank, rank × u64 dims, raw little-endian values
//! ```
//!
//! Nothing may follow the last tensor. Files are written to a temp sibling
//! and renamed into place.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use super::write_atomic;
use crate::error::{JetError, Result};
use crate::numerics::{DType, Float, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"JETF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
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

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn from_tensor<F: Float>(name: impl Into<String>, t: &Tensor<F>) -> Self {
        let data = match F::DTYPE {
            DType::F32 => TensorData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => TensorData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        NamedTensor {
            name: name.into(),
            shape: t.shape().to_vec(),
            data,
        }
    }

    /// Convert back, requiring the stored dtype to be `F`.
    pub fn to_tensor<F: Float>(&self) -> Result<Tensor<F>> {
        if self.data.dtype() != F::DTYPE {
            return Err(JetError::config(format!(
                "tensor {} is stored as {}, model uses {}",
                self.name,
                self.data.dtype(),
                F::DTYPE
            )));
        }
        let values: Vec<F> = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| F::of(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| F::of(x)).collect(),
        };
        Tensor::new(&self.shape, values)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: String,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Serialize to bytes. Fails on duplicate names or shape/data mismatch.
pub fn write_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&ck.step.to_le_bytes());
    out.extend_from_slice(&(ck.config.len() as u64).to_le_bytes());
    out.extend_from_slice(ck.config.as_bytes());
    out.extend_from_slice(&(ck.tensors.len() as u32).to_le_bytes());
    for t in &ck.tensors {
        if !seen.insert(t.name.as_str()) {
            return Err(JetError::Usage(format!(
                "duplicate tensor name {:?} in checkpoint",
                t.name
            )));
        }
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(JetError::shape(
                "write_checkpoint",
                format!(
                    "{} has shape {:?} but {} values",
                    t.name,
                    t.shape,
                    t.data.len()
                ),
            ));
        }
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.data.dtype().code());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &t.data {
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                JetError::format(
                    self.path,
                    format!("truncated while reading {what} at byte {}", self.pos),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v)
            .map_err(|_| JetError::format(self.path, format!("{what} {v} is too large")))
    }

    fn string(&mut self, n: usize, what: &str) -> Result<String> {
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| JetError::format(self.path, format!("{what} is not UTF-8")))
    }
}

/// Parse bytes; `path` only labels errors.
pub fn read_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(JetError::format(path, "bad magic, not a JETF checkpoint"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(JetError::Version {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let step = r.u64("step")?;
    let clen = r.len("config length")?;
    let config = r.string(clen, "config")?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    let mut seen = HashSet::new();
    for _ in 0..count {
        let nlen = r.u32("name length")? as usize;
        let name = r.string(nlen, "tensor name")?;
        if !seen.insert(name.clone()) {
            return Err(JetError::format(
                path,
                format!("duplicate tensor name {name:?}"),
            ));
        }
        let code = r.take(1, "dtype")?[0];
        let dtype = DType::from_code(code).ok_or_else(|| {
            JetError::format(
                path,
                format!("unknown dtype code {code} for tensor {name:?}"),
            )
        })?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.len("dimension")?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| JetError::format(path, format!("tensor {name:?} is too large")))?;
        let bytes_needed = n
            .checked_mul(dtype.size_bytes())
            .ok_or_else(|| JetError::format(path, format!("tensor {name:?} is too large")))?;
        let raw = r.take(bytes_needed, "tensor data")?;
        let data = match dtype {
            DType::F32 => TensorData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        tensors.push(NamedTensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(JetError::format(
            path,
            format!(
                "{} trailing bytes after the tensor table",
                bytes.len() - r.pos
            ),
        ));
    }
    Ok(Checkpoint {
        step,
        config,
        tensors,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &write_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| JetError::io(path, e))?;
    read_checkpoint(&bytes, path)
}
