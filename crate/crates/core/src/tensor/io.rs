//! Portable tensor encoding: `"FTT1"`, `u8` dtype code (0 = f32, 1 = f64),
//! `u8` rank, rank × little-endian `u64` extents, then the row-major
//! little-endian payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{DType, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FTT1";

/// Encoded size of a tensor with this shape and dtype.
pub fn encoded_len(shape: &[usize], dtype: DType) -> usize {
    4 + 1 + 1 + 8 * shape.len() + shape.iter().product::<usize>() * dtype.size_of()
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank {} too large", t.rank())))?;
    w.write_all(MAGIC)?;
    w.write_all(&[t.dtype().code(), rank])?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    match t.dtype() {
        DType::F32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        DType::F64 => {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head).map_err(truncated)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad tensor magic".into()));
    }
    let dtype = DType::from_code(head[4]).ok_or_else(|| Error::Format(format!("unknown dtype code {}", head[4])))?;
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(truncated)?;
        let e = usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Format("extent overflow".into()))?;
        numel = numel
            .checked_mul(e)
            .ok_or_else(|| Error::Format("element count overflow".into()))?;
        shape.push(e);
    }
    let width = dtype.size_of();
    let mut payload = vec![0u8; numel.checked_mul(width).ok_or_else(|| Error::Format("payload overflow".into()))?];
    r.read_exact(&mut payload).map_err(truncated)?;
    let data = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Tensor::with_dtype(&shape, data, dtype).map_err(|e| Error::Format(format!("invalid tensor: {e}")))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated tensor data".into())
    } else {
        Error::Io(e)
    }
}

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(t.shape(), t.dtype()));
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

/// Decodes exactly one tensor; trailing bytes are an error.
pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = bytes;
    let t = read_tensor(&mut cur)?;
    if !cur.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after tensor", cur.len())));
    }
    Ok(t)
}

pub fn save(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, to_bytes(t))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    from_bytes(&fs::read(path)?)
}
