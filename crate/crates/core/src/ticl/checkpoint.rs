//! Named-tensor checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FTCK" | u32 version | u32 meta_len | meta (UTF-8 "key=value\n" lines)
//!        | u32 count | count x (u16 name_len | name | FTT1 tensor)
//!        | SHA-256 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{io as tensor_io, DType, Tensor};

pub const MAGIC: &[u8; 4] = b"FTCK";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

/// Serialized size of a checkpoint holding tensors of these shapes, not
/// counting the metadata text.
pub fn encoded_len(shapes: &[(String, Vec<usize>)], dtype: DType) -> usize {
    let body: usize = shapes
        .iter()
        .map(|(name, shape)| 2 + name.len() + tensor_io::encoded_len(shape, dtype))
        .sum();
    4 + 4 + 4 + 4 + body + DIGEST_LEN
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Metadata value parsed as `T`; missing or malformed is a format error.
    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta(key)
            .ok_or_else(|| Error::Format(format!("checkpoint metadata is missing {key:?}")))?;
        raw.parse()
            .map_err(|_| Error::Format(format!("checkpoint metadata {key:?} has invalid value {raw:?}")))
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Appends every tensor of `set` under `prefix`.
    pub fn push_set(&mut self, prefix: &str, set: &impl ParamSet) {
        for (name, t) in set.named_tensors(prefix) {
            self.tensors.push((name, t.clone()));
        }
    }

    /// Overwrites every tensor of `set` from the entries under `prefix`;
    /// names and shapes must match exactly.
    pub fn restore_set(&self, prefix: &str, set: &mut impl ParamSet) -> Result<()> {
        let names: Vec<String> = set.named_tensors(prefix).into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(set.tensors_mut()) {
            let t = self
                .tensor(name)
                .ok_or_else(|| Error::Format(format!("checkpoint has no tensor {name:?}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor {name:?} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let mut meta = String::new();
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::InvalidArgument(format!("metadata entry {k:?}={v:?} is not a single key=value line")));
            }
            meta.push_str(&format!("{k}={v}\n"));
        }
        out.extend_from_slice(&len_u32(meta.len())?.to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&len_u32(self.tensors.len())?.to_le_bytes());
        for (name, t) in &self.tensors {
            let n = u16::try_from(name.len()).map_err(|_| Error::InvalidArgument(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&n.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            tensor_io::write_tensor(&mut out, t)?;
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + DIGEST_LEN {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum("checkpoint".into()));
        }
        let mut cur = &body[8..];
        let meta_len = take_u32(&mut cur)? as usize;
        let meta_bytes = take(&mut cur, meta_len)?;
        let meta_text =
            std::str::from_utf8(meta_bytes).map_err(|_| Error::Format("checkpoint metadata is not UTF-8".into()))?;
        let meta = meta_text
            .lines()
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Format(format!("bad metadata line {l:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let count = take_u32(&mut cur)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = u16::from_le_bytes(take(&mut cur, 2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut cur, n)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let t = tensor_io::read_tensor(&mut cur)?;
            tensors.push((name, t));
        }
        if !cur.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes in checkpoint", cur.len())));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("length {n} exceeds u32")))
}

fn take<'a>(cur: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if cur.len() < n {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let (head, rest) = cur.split_at(n);
    *cur = rest;
    Ok(head)
}

fn take_u32(cur: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(cur, 4)?.try_into().unwrap()))
}
