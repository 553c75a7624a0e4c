//! The binary container used for checkpoints and task record files.
//!
//! ```text
//! magic      8 bytes   "GBCN0001"
//! meta_len   u32 LE
//! meta       meta_len bytes of UTF-8 JSON
//! count      u32 LE    number of arrays
//! per array:
//!   name_len u32 LE, name (UTF-8)
//!   dtype    u8        1 = f64
//!   ndim     u32 LE, dims: ndim × u64 LE
//!   payload  product(dims) × f64 LE
//! crc        u32 LE    CRC-32 of every byte after the magic
//! ```
//!
//! JSON objects are written with sorted keys and shortest round-trip float
//! formatting, so reading a file and writing it back reproduces it byte for
//! byte.

use std::path::Path;

use crate::autodiff::NdArray;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GBCN0001";
const FAMILY: &[u8; 4] = b"GBCN";
const DTYPE_F64: u8 = 1;

/// Decoded contents of a container file.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub metadata: serde_json::Value,
    pub arrays: Vec<(String, NdArray)>,
}

impl Container {
    pub fn array(&self, name: &str) -> Option<&NdArray> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.metadata).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let mut body = Vec::new();
        put_u32(&mut body, len_u32(meta.len())?);
        body.extend_from_slice(&meta);
        put_u32(&mut body, len_u32(self.arrays.len())?);
        for (name, a) in &self.arrays {
            put_u32(&mut body, len_u32(name.len())?);
            body.extend_from_slice(name.as_bytes());
            body.push(DTYPE_F64);
            put_u32(&mut body, len_u32(a.ndim())?);
            for &d in a.shape() {
                body.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in a.data() {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&body);
        let mut out = Vec::with_capacity(8 + body.len() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&body);
        put_u32(&mut out, crc);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != FAMILY {
            return Err(Error::Checkpoint("not a GBCN container (bad magic)".into()));
        }
        if &bytes[..8] != MAGIC {
            let found = String::from_utf8_lossy(&bytes[4..8]).into_owned();
            return Err(Error::Checkpoint(format!(
                "unsupported container version {found} (expected 0001)"
            )));
        }
        if bytes.len() < 12 {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (body, crc) = bytes[8..].split_at(bytes.len() - 12);
        let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
        let mut r = Reader { bytes: body, pos: 0 };
        let meta_len = r.u32()? as usize;
        let meta = r.take(meta_len)?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::Checkpoint(format!(
                    "array `{name}` has unknown dtype tag {dtype}"
                )));
            }
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                let d = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                shape.push(usize::try_from(d).map_err(|_| Error::Checkpoint("dimension overflow".into()))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint("array size overflow".into()))?;
            let payload = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint("array size overflow".into()))?,
            )?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push((name, NdArray::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!(
                "{} unexpected trailing bytes",
                body.len() - r.pos
            )));
        }
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch: file is corrupted".into()));
        }
        let metadata = serde_json::from_slice(meta).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        Ok(Self { metadata, arrays })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} does not fit the container")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
