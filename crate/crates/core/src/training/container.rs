//! Binary parameter container shared by model and classifier checkpoints.
//!
//! ```text
//! "COMAECKP" | u32 version | u64 header_len | header JSON | sha256(header)
//! u32 tensor_count | { u32 name_len | name | u32 ndim | u64 dims.. | f64 data.. }
//! sha256(all preceding bytes)
//! ```
//! All integers and floats are little-endian. The file is parsed completely
//! before anything is returned.

use std::path::Path;

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::taxonomy::{taxonomy_hash, taxonomy_table, verify_taxonomy_table};

const MAGIC: &[u8; 8] = b"COMAECKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    /// Arbitrary JSON object; the taxonomy fields are added on write.
    pub header: Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let Value::Object(mut header) = self.header.clone() else {
            return Err(bad("header must be a JSON object"));
        };
        header.insert("taxonomy".into(), Value::String(taxonomy_table()));
        header.insert("taxonomy_hash".into(), Value::String(taxonomy_hash()));
        self.encode_raw(&Value::Object(header))
    }

    fn encode_raw(&self, header: &Value) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&Sha256::digest(&header));
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let header_len = r.u64()? as usize;
        let header_bytes = r.take(header_len)?;
        let header_digest = r.take(32)?;
        if Sha256::digest(header_bytes).as_slice() != header_digest {
            return Err(bad("header hash mismatch"));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("file is truncated or corrupt"));
        }
        let header: Value = serde_json::from_slice(header_bytes)?;
        let table = header
            .get("taxonomy")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("header lacks the taxonomy table"))?;
        verify_taxonomy_table(table)?;
        if header.get("taxonomy_hash").and_then(Value::as_str) != Some(taxonomy_hash().as_str()) {
            return Err(bad("taxonomy hash mismatch"));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad("tensor size overflows"))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| bad("tensor size overflows"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        Ok(Container { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| bad("unexpected end of file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
