//! Portable named-tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "IFSG"
//! version    u32      (currently 1)
//! count      u32      number of sections
//! section*:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   dtype    u32      0 = f32, 1 = f64, 2 = u32
//!   ndim     u32
//!   dims     u64 * ndim
//!   payload  product(dims) * width(dtype) bytes, row-major
//! ```
//!
//! The reader rejects trailing bytes after the last section.

use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: [u8; 4] = *b"IFSG";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContainerError {
    #[error("bad magic {:?}, expected \"IFSG\"", String::from_utf8_lossy(.0))]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated container while reading {0}")]
    Truncated(String),
    #[error("duplicate section name `{0}`")]
    DuplicateName(String),
    #[error("section name is not valid UTF-8")]
    BadName,
    #[error("unknown dtype code {0}")]
    UnknownDType(u32),
    #[error("{0} trailing bytes after last section")]
    TrailingBytes(usize),
    #[error("section `{name}`: {msg}")]
    BadSection { name: String, msg: String },
    #[error("missing section `{0}`")]
    MissingSection(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U32,
}

impl DType {
    pub fn code(self) -> u32 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U32 => 2,
        }
    }

    pub fn from_code(code: u32) -> Result<Self, ContainerError> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::U32),
            other => Err(ContainerError::UnknownDType(other)),
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 | DType::U32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U32(_) => DType::U32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_u32(dims: Vec<usize>, data: Vec<u32>) -> Result<Self> {
        Self::new(dims, TensorData::U32(data))
    }

    /// Stores a real array using the dtype native to `T`.
    pub fn from_array<T: Scalar>(array: &ArrayD<T>) -> Self {
        let dims = array.shape().to_vec();
        let values: Vec<f64> = array.iter().map(|v| v.as_f64()).collect();
        let data = match T::DTYPE {
            DType::F32 => TensorData::F32(values.into_iter().map(|v| v as f32).collect()),
            _ => TensorData::F64(values),
        };
        Tensor { dims, data }
    }

    /// Reads a real tensor into `T`, converting between f32 and f64 as needed.
    pub fn to_array<T: Scalar>(&self) -> Result<ArrayD<T>> {
        let values: Vec<T> = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
            TensorData::U32(_) => return Err(Error::invalid("expected a real-valued tensor, got u32")),
        };
        ArrayD::from_shape_vec(IxDyn(&self.dims), values).map_err(|e| Error::shape(e.to_string()))
    }

    pub fn as_u32(&self) -> Result<&[u32]> {
        match &self.data {
            TensorData::U32(v) => Ok(v),
            _ => Err(Error::invalid("expected a u32 tensor")),
        }
    }
}

/// Ordered collection of uniquely named tensors. Insertion order is the file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorMap {
    sections: IndexMap<String, Tensor>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.sections.contains_key(&name) {
            return Err(ContainerError::DuplicateName(name).into());
        }
        self.sections.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.sections.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| ContainerError::MissingSection(name.to_string()).into())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sections.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.sections.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.sections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sections.is_empty()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, tensor) in &self.sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&tensor.data.dtype().code().to_le_bytes());
            out.extend_from_slice(&(tensor.dims.len() as u32).to_le_bytes());
            for &d in &tensor.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &tensor.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ContainerError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(ContainerError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(ContainerError::UnsupportedVersion(version));
        }
        let count = r.u32("section count")?;
        let mut sections = IndexMap::new();
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "section name")?)
                .map_err(|_| ContainerError::BadName)?
                .to_string();
            let dtype = DType::from_code(r.u32("dtype")?)?;
            let ndim = r.u32("ndim")? as usize;
            let mut dims = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                dims.push(r.u64("dims")? as usize);
            }
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(dtype.width()).map(|_| n))
                .ok_or_else(|| ContainerError::BadSection {
                    name: name.clone(),
                    msg: format!("dims {dims:?} overflow"),
                })?;
            let payload = r.take(count * dtype.width(), &format!("payload of `{name}`"))?;
            let data = match dtype {
                DType::F32 => TensorData::F32(
                    payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::F64 => TensorData::F64(
                    payload
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::U32 => TensorData::U32(
                    payload
                        .chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            if sections.contains_key(&name) {
                return Err(ContainerError::DuplicateName(name));
            }
            sections.insert(name, Tensor { dims, data });
        }
        if r.pos != bytes.len() {
            return Err(ContainerError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(TensorMap { sections })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|source| Error::ContainerFile {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.encode())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ContainerError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| ContainerError::Truncated(what.to_string()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place,
/// so a failed run never leaves a partial file behind.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
