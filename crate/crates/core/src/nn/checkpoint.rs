//! Binary checkpoint container.
//!
//! Layout (all integers are little-endian `u32`):
//!
//! ```text
//! magic     4 bytes  "EGCK"
//! version   u32      1
//! meta_len  u32      length of the metadata blob
//! meta      bytes    UTF-8 JSON chosen by the caller (model config, vocabulary, ...)
//! count     u32      number of tensors
//! tensor*   repeated `count` times:
//!   name_len u32, name bytes (UTF-8)
//!   ndim     u32, dims u32 × ndim
//!   values   f32 little-endian × product(dims), row-major
//! ```
//!
//! Tensors appear in parameter-store insertion order.

use std::io::{Read, Write};

use super::array::Array;
use super::params::ParamStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EGCK";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(metadata: &str, params: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize)?;
    put_u32(&mut out, metadata.len())?;
    out.extend_from_slice(metadata.as_bytes());
    put_u32(&mut out, params.len())?;
    for (name, value) in params.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, value.shape().len())?;
        for &d in value.shape() {
            put_u32(&mut out, d)?;
        }
        for &v in value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write<W: Write>(mut w: W, metadata: &str, params: &ParamStore) -> Result<()> {
    let bytes = encode(metadata, params)?;
    w.write_all(&bytes)
        .map_err(|e| Error::io("writing checkpoint", e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(String, ParamStore)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let metadata = c.string()?;
    let count = c.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = c.string()?;
        let ndim = c.u32()?;
        let shape = (0..ndim).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let size: usize = shape.iter().product();
        let raw = c.take(size.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        params.insert(name, Array::new(shape, data)?)?;
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((metadata, params))
}

pub fn read<R: Read>(mut r: R) -> Result<(String, ParamStore)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| Error::io("reading checkpoint", e))?;
    decode(&buf)
}
