//! `MSCP` weight files.
//!
//! Layout, all integers `u32` little-endian:
//!
//! ```text
//! "MSCP" | version = 1 | tensor_count
//! repeated tensor_count times:
//!     name_len | name (UTF-8) | rank | dims[rank] | f32 LE payload (4·Πdims bytes)
//! ```

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, LoadError, Result};
use crate::tensor::Tensor;
use crate::vim::EncoderParams;

pub const MAGIC: [u8; 4] = *b"MSCP";
pub const VERSION: u32 = 1;

pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
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
    fn take(&mut self, n: usize) -> Result<&'a [u8], LoadError> {
        let remaining = self.buf.len() - self.pos;
        if n > remaining {
            return Err(LoadError::Truncated {
                offset: self.buf.len(),
                needed: n - remaining,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, LoadError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses every tensor in file order.
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, LoadError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(LoadError::BadMagic { found: magic });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(LoadError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32()?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let offset = r.pos;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| LoadError::BadName { offset })?
            .to_owned();
        if !seen.insert(name.clone()) {
            return Err(LoadError::Duplicate(name));
        }
        let rank = r.u32()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
        let bytes_needed = dims
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d))
            .ok_or(LoadError::Truncated {
                offset: bytes.len(),
                needed: usize::MAX,
            })?;
        let payload = r.take(bytes_needed)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(dims.clone(), data).map_err(|_| LoadError::WrongShape {
            name: name.clone(),
            found: dims,
            expected: vec![],
        })?;
        out.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(LoadError::Trailing(bytes.len() - r.pos));
    }
    Ok(out)
}

pub fn params_to_bytes(params: &EncoderParams) -> Vec<u8> {
    let named = params.named_tensors();
    encode_tensors(named.iter().map(|(n, t)| (n.as_str(), *t)))
}

/// Fills parameters for `cfg` from decoded tensors. Every expected name must
/// be present with the expected shape and no other names may appear.
pub fn params_from_bytes(bytes: &[u8], cfg: &ModelConfig) -> Result<EncoderParams> {
    let mut found: BTreeMap<String, Tensor> = decode_tensors(bytes)?.into_iter().collect();
    let mut params = EncoderParams::zeros(cfg);
    let mut missing = Vec::new();
    for (name, slot) in params.named_tensors_mut() {
        match found.remove(&name) {
            Some(t) if t.dims() == slot.dims() => *slot = t,
            Some(t) => {
                return Err(LoadError::WrongShape {
                    name,
                    found: t.dims().to_vec(),
                    expected: slot.dims().to_vec(),
                }
                .into())
            }
            None => missing.push(name),
        }
    }
    if !found.is_empty() {
        return Err(LoadError::Unknown(found.into_keys().collect()).into());
    }
    if !missing.is_empty() {
        return Err(LoadError::Missing(missing).into());
    }
    Ok(params)
}

pub fn save_weights(params: &EncoderParams, path: &Path) -> Result<()> {
    std::fs::write(path, params_to_bytes(params)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_weights(path: &Path, cfg: &ModelConfig) -> Result<EncoderParams> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    params_from_bytes(&bytes, cfg)
}
