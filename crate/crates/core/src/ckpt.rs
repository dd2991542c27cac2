//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, `u64` header
//! length, a JSON header (kind, free-form metadata, tensor table) and then
//! every tensor's values as little-endian `f64` in table order. Values are
//! stored bit-for-bit, so a round trip is exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"DAFNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.push((name.into(), t.clone()));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        Ok(self.tensors.remove(pos).1)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| Entry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let n: usize = self.tensors.iter().map(|(_, t)| t.numel()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut pos = 20 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = bytes
                .get(pos..pos + 8 * n)
                .ok_or_else(|| bad("truncated data"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
            pos += 8 * n;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads and checks the container kind.
    pub fn load_kind(path: &Path, kind: &str) -> Result<Self> {
        let c = Self::load(path)?;
        if c.kind != kind {
            return Err(Error::Checkpoint(format!(
                "{} holds a `{}` checkpoint, expected `{kind}`",
                path.display(),
                c.kind
            )));
        }
        Ok(c)
    }
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(res?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut c = Container::new("test", serde_json::json!({"a": 1}));
        let awkward = vec![0.1 + 0.2, -0.0, f64::MIN_POSITIVE, 1e300, -3.5];
        c.push("x", &Tensor::vector(awkward.clone()));
        c.push("m", &Tensor::identity(2));
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.get("x").unwrap().data()), bits(&awkward));
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Container::from_bytes(b"not a checkpoint at all").is_err());
        let mut bytes = Container::new("t", serde_json::Value::Null)
            .to_bytes()
            .unwrap();
        bytes.push(0);
        assert!(Container::from_bytes(&bytes).is_err());
    }
}
