//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "EADN"
//! version  u32      1
//! tag      u32 length + UTF-8 bytes (model variant)
//! count    u32
//! count × entry:
//!   name   u32 length + UTF-8 bytes
//!   dtype  u8       0 = f32, 1 = f64
//!   ndim   u8
//!   dims   ndim × u32
//!   values product(dims) × (4 | 8) bytes, little-endian IEEE 754
//! ```
//!
//! Non-trainable buffers (spectral-norm `u` vectors) are ordinary entries
//! whose names end in `.weight_u`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use eadnet_tensor::{DType, Element, Tensor};

use crate::error::{CheckpointError, Error, Result};
use crate::models::ModelParams;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"EADN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self {
            Self::F32(_) => DType::F32,
            Self::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Self::F32(t) => t.shape(),
            Self::F64(t) => t.shape(),
        }
    }

    /// Converts to element type `T` (exact when the stored dtype is `T`).
    pub fn to<T: Element>(&self) -> Tensor<T> {
        match self {
            Self::F32(t) => t.cast(),
            Self::F64(t) => t.cast(),
        }
    }

    fn from_tensor<T: Element>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => Self::F32(t.cast()),
            DType::F64 => Self::F64(t.cast()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tag: String,
    pub entries: Vec<(String, StoredTensor)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(
        &mut self,
        n: usize,
        what: &'static str,
    ) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn string(&mut self, what: &'static str) -> std::result::Result<String, CheckpointError> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| CheckpointError::BadUtf8(what))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn decode_values<T: Element>(
    r: &mut Reader<'_>,
    name: &str,
    dims: Vec<usize>,
) -> std::result::Result<Tensor<T>, CheckpointError> {
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(CheckpointError::Truncated("tensor values"))?;
    let size = T::DTYPE.size();
    let raw = r.take(
        n.checked_mul(size)
            .ok_or(CheckpointError::Truncated("tensor values"))?,
        "tensor values",
    )?;
    let data = raw.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(dims, data).map_err(|e| CheckpointError::BadTensor {
        name: name.to_string(),
        reason: e.to_string(),
    })
}

impl Checkpoint {
    pub fn from_params<T: Element>(params: &ModelParams<T>) -> Self {
        Self {
            tag: params.tag().to_string(),
            entries: params
                .entries()
                .iter()
                .map(|e| (e.name.clone(), StoredTensor::from_tensor(&e.tensor)))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION as usize);
        put_str(&mut out, &self.tag);
        put_u32(&mut out, self.entries.len());
        for (name, t) in &self.entries {
            put_str(&mut out, name);
            out.push(t.dtype() as u8);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            match t {
                StoredTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                StoredTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let tag = r.string("tag")?;
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        let mut names = HashSet::new();
        for _ in 0..count {
            let name = r.string("tensor name")?;
            if !names.insert(name.clone()) {
                return Err(CheckpointError::Duplicate(name));
            }
            let tag = r.u8("dtype")?;
            let dtype = DType::from_tag(tag).ok_or(CheckpointError::BadDType(tag))?;
            let ndim = r.u8("ndim")? as usize;
            let dims = (0..ndim)
                .map(|_| r.u32("dims").map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let t = match dtype {
                DType::F32 => StoredTensor::F32(decode_values(&mut r, &name, dims)?),
                DType::F64 => StoredTensor::F64(decode_values(&mut r, &name, dims)?),
            };
            entries.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self { tag, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }

    pub fn tensors<T: Element>(&self) -> Vec<(String, Tensor<T>)> {
        self.entries
            .iter()
            .map(|(n, t)| (n.clone(), t.to()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every tensor `params` needs, by name. Extra checkpoint entries
    /// are ignored; the first missing or misshapen tensor is an error.
    pub fn load_into<T: Element>(&self, params: &mut ModelParams<T>) -> Result<()> {
        params.load_from(&self.tensors())
    }
}
