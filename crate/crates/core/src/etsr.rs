//! Raw tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"ETSR" | version: u8 | rank: u32 | extents: rank × u32 | data
//! ```
//!
//! Version 1 stores data as `f32` and is what image and voxel dumps use.
//! Version 2 stores `f64` and is used inside checkpoints so that a resumed
//! run continues from bit-identical state.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ETSR";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn version(self) -> u8 {
        match self {
            Precision::F32 => 1,
            Precision::F64 => 2,
        }
    }
}

pub fn encode(t: &Tensor, precision: Precision) -> Vec<u8> {
    let width = match precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let mut buf = Vec::with_capacity(9 + 4 * t.rank() + width * t.numel());
    buf.extend_from_slice(MAGIC);
    buf.push(precision.version());
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match precision {
        Precision::F32 => {
            for &x in t.data() {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        Precision::F64 => {
            for &x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    buf
}

/// Decodes one tensor from the front of `bytes`, returning it and the number
/// of bytes consumed.
pub fn decode(bytes: &[u8]) -> std::result::Result<(Tensor, usize), String> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = cur.take(1)?[0];
    let width = match version {
        1 => 4,
        2 => 8,
        v => return Err(format!("unsupported version {v}")),
    };
    let rank = cur.u32()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(cur.u32()? as usize);
    }
    let n: usize = shape.iter().product();
    let raw = cur.take(n.checked_mul(width).ok_or("size overflow")?)?;
    let data = match width {
        4 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        _ => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
    };
    let t = Tensor::new(&shape, data).map_err(|e| e.to_string())?;
    Ok((t, cur.pos))
}

pub fn write(path: &Path, t: &Tensor, precision: Precision) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(t, precision)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode(&bytes).map_err(|msg| Error::Format { path: path.to_path_buf(), msg })?;
    if used != bytes.len() {
        return Err(Error::Format { path: path.to_path_buf(), msg: format!("{} trailing bytes", bytes.len() - used) });
    }
    Ok(t)
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
