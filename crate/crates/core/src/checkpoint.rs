//! Binary container of named tensors.
//!
//! ```text
//! magic    "TSTCD" (5 bytes)
//! version  u32 LE (= 1)
//! count    u32 LE
//! count × {
//!     name_len u32 LE, name UTF-8 bytes,
//!     ndim u32 LE, ndim × dim u64 LE,
//!     product(dims) × f64 LE
//! }
//! ```
//!
//! Trailing bytes after the last tensor are rejected.

use std::path::Path;

use crate::error::{CheckpointError, Error};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"TSTCD";
pub const VERSION: u32 = 1;
/// Upper bound on tensor rank accepted by the decoder.
pub const MAX_NDIM: u32 = 8;

pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let payload: usize = tensors
        .iter()
        .map(|(n, t)| 8 + n.len() + 8 * t.shape().len() + 8 * t.len())
        .sum();
    let mut out = Vec::with_capacity(13 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let left = self.buf.len() - self.pos;
        if n > left {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n - left,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let at = r.pos;
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| CheckpointError::Malformed {
                offset: at + 4,
                detail: format!("tensor name is not UTF-8: {e}"),
            })?
            .to_string();
        let ndim_at = r.pos;
        let ndim = r.u32()?;
        if ndim > MAX_NDIM {
            return Err(CheckpointError::Malformed {
                offset: ndim_at,
                detail: format!("tensor '{name}' has {ndim} dimensions"),
            });
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        let mut numel: usize = 1;
        for _ in 0..ndim {
            let d_at = r.pos;
            let d = r.u64()?;
            let d = usize::try_from(d).ok();
            numel = match d.and_then(|d| numel.checked_mul(d).map(|n| (d, n))) {
                Some((d, n)) => {
                    shape.push(d);
                    n
                }
                None => {
                    return Err(CheckpointError::Malformed {
                        offset: d_at,
                        detail: format!("tensor '{name}' size overflows"),
                    })
                }
            };
        }
        let nbytes = numel.checked_mul(8).ok_or_else(|| CheckpointError::Malformed {
            offset: r.pos,
            detail: format!("tensor '{name}' size overflows"),
        })?;
        let raw = r.take(nbytes)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).expect("element count matches shape");
        if out.iter().any(|(n, _): &(String, Tensor)| *n == name) {
            return Err(CheckpointError::Malformed {
                offset: at,
                detail: format!("duplicate tensor '{name}'"),
            });
        }
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed {
            offset: r.pos,
            detail: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, tensors: &[(String, Tensor)]) -> Result<(), Error> {
    std::fs::write(path, encode(tensors))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>, Error> {
    let bytes = std::fs::read(path)?;
    Ok(decode(&bytes)?)
}
