//! Versioned binary container for named `f64` arrays plus JSON metadata.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `REFSRCKP` |
//! | 4     | container format version (u32) |
//! | 8     | header length `n` (u64) |
//! | n     | UTF-8 JSON header `{"meta": ..., "tensors": [{"name", "shape"}, ...]}` |
//! | ...   | tensor data in header order, each as raw `f64` |
//! | 32    | SHA-256 of every preceding byte |
//!
//! Tensors are stored in name order, so equal contents encode to identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use refsr_autograd::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"REFSRCKP";
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

pub fn encode(c: &Container) -> Result<Vec<u8>> {
    let header = Header {
        meta: c.meta.clone(),
        tensors: c.tensors.iter().map(|(n, t)| Entry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let payload: usize = c.tensors.values().map(Tensor::numel).sum();
    let mut buf = Vec::with_capacity(20 + json.len() + payload * 8 + DIGEST_LEN);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in c.tensors.values() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    if bytes.len() < 20 + DIGEST_LEN {
        return Err(Error::Corruption("checkpoint truncated".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Corruption("checkpoint checksum mismatch (truncated or modified)".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("checkpoint format version {version}, expected {FORMAT_VERSION}")));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let json = body.get(20..20 + hlen).ok_or_else(|| Error::Corruption("checkpoint header truncated".into()))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| Error::Corruption(format!("checkpoint header: {e}")))?;
    let mut at = 20 + hlen;
    let mut tensors = BTreeMap::new();
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = body
            .get(at..at + n * 8)
            .ok_or_else(|| Error::Corruption(format!("checkpoint data for `{}` truncated", entry.name)))?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        tensors.insert(entry.name, Tensor::new(&entry.shape, data));
        at += n * 8;
    }
    if at != body.len() {
        return Err(Error::Corruption("trailing bytes after checkpoint data".into()));
    }
    Ok(Container { meta: header.meta, tensors })
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save(c: &Container, path: &Path) -> Result<()> {
    write_atomic(path, &encode(c)?)
}

pub fn load(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut tensors = BTreeMap::new();
        tensors.insert("b".to_string(), Tensor::new(&[2], vec![1.5, -0.0]));
        tensors.insert("a".to_string(), Tensor::new(&[1, 2, 2], vec![f64::MIN_POSITIVE, 1e300, -3.25, 0.1]));
        Container { meta: serde_json::json!({"arch_id": "x", "version": 1}), tensors }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let bytes = encode(&sample()).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(encode(&back).unwrap(), bytes);
        assert_eq!(back.tensors["b"].data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn damage_is_detected() {
        let bytes = encode(&sample()).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 5]), Err(Error::Corruption(_))));
        assert!(matches!(decode(&bytes[..10]), Err(Error::Corruption(_))));
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(matches!(decode(&flipped), Err(Error::Corruption(_))));
        assert!(matches!(decode(b"PNG....................................."), Err(Error::Format(_))));
    }

    #[test]
    fn atomic_save_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/ck.bin");
        save(&sample(), &path).unwrap();
        assert_eq!(load(&path).unwrap(), sample());
        let names: Vec<_> = std::fs::read_dir(path.parent().unwrap()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names, vec![std::ffi::OsString::from("ck.bin")]);
    }
}
