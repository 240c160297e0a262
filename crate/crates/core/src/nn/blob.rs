//! Little-endian named-tensor files.
//!
//! Layout: magic `CATB`, format byte (4 = f32, 8 = f64), `u32` entry count, then
//! per entry a `u32` name length, UTF-8 name, `u32` rank, `u64` dims and the values.

use std::io::{Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CATB";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

fn bad(path: &Path, msg: &str) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

pub fn encode_tensors(entries: &[(String, Tensor)], precision: Precision) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(match precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    });
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            match precision {
                Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode_tensors(buf: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4) != Some(MAGIC.as_slice()) {
        return Err(bad(path, "not a tensor file"));
    }
    let width = match c.take(1) {
        Some([4]) => 4,
        Some([8]) => 8,
        _ => return Err(bad(path, "unknown value format")),
    };
    let count = c.u32().ok_or_else(|| bad(path, "truncated header"))?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let trunc = || bad(path, "truncated entry");
        let nlen = c.u32().ok_or_else(trunc)? as usize;
        let name = std::str::from_utf8(c.take(nlen).ok_or_else(trunc)?)
            .map_err(|_| bad(path, "entry name is not UTF-8"))?
            .to_string();
        let rank = c.u32().ok_or_else(trunc)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64().ok_or_else(trunc)? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(trunc)?;
        let raw = c.take(n.checked_mul(width).ok_or_else(trunc)?).ok_or_else(trunc)?;
        let data: Vec<f64> = if width == 4 {
            raw.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect()
        } else {
            raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect()
        };
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    if c.pos != buf.len() {
        return Err(bad(path, "trailing bytes"));
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, entries: &[(String, Tensor)], precision: Precision) -> Result<()> {
    let bytes = encode_tensors(entries, precision);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode_tensors(&buf, path)
}
