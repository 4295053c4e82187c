//! Binary checkpoint: `DBXCKPT1`, then per parameter a `u32` name length,
//! the UTF-8 name, a `u32` dim count, `u64` dims and the values as
//! little-endian `f64`.

use std::io::{Read, Write};

use super::{Param, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DBXCKPT1";

fn write_err(e: std::io::Error) -> Error {
    Error::io("<checkpoint>", e)
}

pub fn write_checkpoint<T: Scalar, W: Write>(mut out: W, params: &[Param<T>]) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC).map_err(write_err)?;
    for p in params {
        let name = p.name.as_bytes();
        let shape = p.value.shape();
        let mut buf = Vec::with_capacity(8 + name.len() + 8 * shape.len() + 8 * p.value.len());
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        out.write_all(&buf).map_err(write_err)?;
    }
    out.flush().map_err(write_err)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Data(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Reads every `(name, tensor)` record from a checkpoint stream.
pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Vec<(String, Tensor<f64>)>> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<checkpoint>", e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Data("not a DBXCKPT1 checkpoint".into()));
    }
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let n = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(n)?)
            .map_err(|_| Error::Data("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = cur.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let data = cur
            .take(
                count
                    .checked_mul(8)
                    .ok_or_else(|| Error::Data("bad dims".into()))?,
            )?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}
