//! The `MAMC` checkpoint format.
//!
//! Layout (little-endian): magic `MAMC`, u32 version, u32 config length and
//! config JSON, u32 tensor count, then per tensor in name order: u16 name
//! length, name bytes, u8 rank, u32 dims, f32 data.

use std::collections::BTreeMap;
use std::path::Path;

use numcore::Tensor;

use super::config::ModelConfig;
use super::params::Params;
use crate::error::{io_err, write_atomic, Error, Result};

const MAGIC: &[u8; 4] = b"MAMC";
const VERSION: u32 = 1;

pub fn to_bytes(params: &Params) -> Vec<u8> {
    let config = serde_json::to_vec(params.config()).expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(params.tensors().len() as u32).to_le_bytes());
    for (name, t) in params.tensors() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(params: &Params, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(params))
}

pub fn load(path: &Path) -> Result<Params> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    from_bytes(&bytes, path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated {
            path: self.path.to_path_buf(),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn format(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            detail: detail.into(),
        }
    }
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Params> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "MAMC",
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::BadVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let len = r.u32()? as usize;
    let config: ModelConfig =
        serde_json::from_slice(r.take(len)?).map_err(|e| r.format(format!("config: {e}")))?;
    let count = r.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| r.format("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u8()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let size = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::DimOverflow {
                path: path.to_path_buf(),
                dims: dims.clone(),
            })?;
        let data = r
            .take(size)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| r.format(format!("tensor `{name}`: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(r.format(format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(r.format("trailing bytes"));
    }
    Params::from_tensors(config, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let p = Params::init(&ModelConfig::toy(20), 5).unwrap();
        let bytes = to_bytes(&p);
        let back = from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, p);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn corrupt_inputs() {
        let p = Params::init(&ModelConfig::toy(20), 5).unwrap();
        let bytes = to_bytes(&p);
        let path = Path::new("mem");
        assert!(matches!(from_bytes(b"XXXX", path), Err(Error::BadMagic { .. })));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 1], path), Err(Error::Truncated { .. })));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(from_bytes(&v2, path), Err(Error::BadVersion { version: 2, .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(from_bytes(&extra, path), Err(Error::Format { .. })));
    }
}
