//! Binary tensor files: `b"CDCT"`, a version byte, `u32` rank, `u32` dims,
//! then the f32 payload; all little-endian.

use std::path::Path;

use crate::error::{CdcError, Result};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"CDCT";
pub const VERSION: u8 = 1;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let dims = t.dims();
    let mut out = Vec::with_capacity(9 + 4 * dims.len() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at
        .checked_add(n)
        .ok_or_else(|| CdcError::BadFormat("length overflow".into()))?;
    if end > bytes.len() {
        return Err(CdcError::Truncated {
            expected: end,
            found: bytes.len(),
        });
    }
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

fn read_u32(bytes: &[u8], at: &mut usize) -> Result<u32> {
    let b = take(bytes, at, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut at = 0;
    if take(bytes, &mut at, 4)? != MAGIC {
        return Err(CdcError::BadFormat("bad magic".into()));
    }
    let version = take(bytes, &mut at, 1)?[0];
    if version != VERSION {
        return Err(CdcError::BadFormat(format!(
            "unsupported version {version}"
        )));
    }
    let rank = read_u32(bytes, &mut at)? as usize;
    if rank == 0 {
        return Err(CdcError::InvalidShape("tensor file has rank 0".into()));
    }
    if rank > (bytes.len() - at) / 4 {
        return Err(CdcError::Truncated {
            expected: at + 4 * rank,
            found: bytes.len(),
        });
    }
    let dims = (0..rank)
        .map(|_| read_u32(bytes, &mut at).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let shape = Shape::new(dims)?;
    let payload = shape
        .numel()
        .checked_mul(4)
        .ok_or_else(|| CdcError::Overflow(shape.dims().to_vec()))?;
    let raw = take(bytes, &mut at, payload)?;
    if at != bytes.len() {
        return Err(CdcError::BadFormat(format!(
            "{} trailing bytes after payload",
            bytes.len() - at
        )));
    }
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::from_vec(shape.dims(), data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_tensor(t)).map_err(|e| CdcError::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| CdcError::io(path, e))?;
    decode_tensor(&bytes)
}
