//! Binary container of named tensors.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic      b"GNFC"
//! version    u32  (= 1)
//! dtype      u8   (1 = f32, 2 = f64)
//! count      u32
//! per tensor:
//!   name_len u32, name utf-8 bytes
//!   ndim     u32, dims u64 × ndim
//!   values   raw little-endian, product(dims) elements
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::param::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"GNFC";

pub fn encode<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_scalars() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Header fields of a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub format_version: u32,
    pub dtype: DType,
    pub count: u32,
}

pub fn read_header(bytes: &[u8]) -> Result<Header> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let format_version = r.u32()?;
    if format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {format_version}"
        )));
    }
    let code = r.take(1)?[0];
    let dtype = DType::from_code(code)
        .ok_or_else(|| Error::Checkpoint(format!("unknown dtype code {code}")))?;
    let count = r.u32()?;
    Ok(Header {
        format_version,
        dtype,
        count,
    })
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let header = read_header(bytes)?;
    if header.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint dtype {} does not match model dtype {}",
            header.dtype.name(),
            T::DTYPE.name()
        )));
    }
    let mut r = Reader { bytes, pos: 13 };
    let mut out = Vec::with_capacity(header.count as usize);
    for _ in 0..header.count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let size = T::DTYPE.size();
        let raw = r.take(numel * size)?;
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub fn save<T: Scalar>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads a checkpoint into an existing store whose layout must match.
pub fn load_into<T: Scalar>(path: &Path, store: &mut ParamStore<T>) -> Result<()> {
    store.load_named(load(path)?)
}
