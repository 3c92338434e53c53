//! MDAC checkpoint files.
//!
//! ```text
//! "MDAC" | version: u32 | json_len: u32 | json header
//! then per tensor: name_len: u32 | name | rank: u32 | dims: u32 × rank | dtype: u8 | data
//! ```
//!
//! Integers and tensor data are little-endian. The JSON header carries the
//! model topology and the tensor count.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BranchedModel, Param, Topology};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"MDAC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    topology: Topology,
    tensors: usize,
}

pub fn to_bytes<T: Real>(model: &BranchedModel<T>) -> Result<Vec<u8>> {
    let header = Header {
        topology: model.topology(),
        tensors: model.params().count(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(T::DTYPE.tag());
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<BranchedModel<T>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "not an MDAC checkpoint"));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: VERSION,
        });
    }
    let json_len = c.u32("header length")? as usize;
    let header_at = c.pos as u64;
    let header: Header = serde_json::from_slice(c.take(json_len, "header")?)
        .map_err(|e| Error::format(header_at, format!("bad header: {e}")))?;
    let mut params = Vec::with_capacity(header.tensors);
    for _ in 0..header.tensors {
        let at = c.pos as u64;
        let name_len = c.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "tensor name")?)
            .map_err(|_| Error::format(at + 4, "tensor name is not UTF-8"))?
            .to_string();
        let rank = c.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("tensor dims")? as usize);
        }
        let tag_at = c.pos as u64;
        let tag = c.take(1, "dtype tag")?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::format(tag_at, format!("unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(Error::format(
                tag_at,
                format!("tensor `{name}` is {dtype:?}, expected {:?}", T::DTYPE),
            ));
        }
        let count: usize = shape.iter().product();
        let data_at = c.pos as u64;
        let raw = c.take(count * dtype.width(), "tensor data")?;
        let data: Vec<T> = raw.chunks_exact(dtype.width()).map(T::read_le).collect();
        let value = Tensor::new(&shape, data, true)
            .map_err(|e| Error::format(data_at, format!("tensor `{name}`: {e}")))?;
        params.push(Param { name, value });
    }
    if c.pos != bytes.len() {
        return Err(Error::format(c.pos as u64, "trailing bytes after last tensor"));
    }
    BranchedModel::from_parts(&header.topology, params)
}

pub fn save_checkpoint<T: Real>(model: &BranchedModel<T>, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<BranchedModel<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
