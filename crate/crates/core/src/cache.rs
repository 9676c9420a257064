//! Columnar binary cache for stage outputs.
//!
//! Layout: the magic line `XVACACHE1\n`, a little-endian `u64` header length,
//! a JSON header (key, metadata, array shapes in storage order), then every
//! array as raw little-endian `f64` in row-major order. Floats round-trip
//! bit-for-bit, so a stage restored from the cache is identical to a fresh run.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, XvaError};

const MAGIC: &[u8] = b"XVACACHE1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    key: String,
    meta: serde_json::Value,
    arrays: Vec<(String, usize, usize)>,
}

/// Named `f64` arrays plus free-form metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ColumnStore {
    pub key: String,
    pub meta: serde_json::Value,
    arrays: BTreeMap<String, Array2<f64>>,
}

impl ColumnStore {
    pub fn new(key: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            meta: serde_json::Value::Null,
            arrays: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, a: Array2<f64>) {
        self.arrays.insert(name.into(), a);
    }

    pub fn insert_vec(&mut self, name: impl Into<String>, v: &[f64]) {
        self.insert(name, Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("shape"));
    }

    pub fn take(&mut self, name: &str) -> Result<Array2<f64>> {
        self.arrays
            .remove(name)
            .ok_or_else(|| XvaError::Serde(format!("cache entry lacks array `{name}`")))
    }

    pub fn take_vec(&mut self, name: &str) -> Result<Vec<f64>> {
        Ok(self.take(name)?.into_iter().collect())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            key: self.key.clone(),
            meta: self.meta.clone(),
            arrays: self.arrays.iter().map(|(k, a)| (k.clone(), a.nrows(), a.ncols())).collect(),
        };
        let h = serde_json::to_vec(&header).expect("header serializes");
        let total: usize = self.arrays.values().map(|a| a.len() * 8).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + h.len() + total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(h.len() as u64).to_le_bytes());
        out.extend_from_slice(&h);
        for a in self.arrays.values() {
            for x in a.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| XvaError::Serde(format!("corrupt cache file: {m}"));
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut pos = MAGIC.len();
        let hlen = u64::from_le_bytes(bytes[pos..pos + 8].try_into().expect("8 bytes")) as usize;
        pos += 8;
        let header: Header = serde_json::from_slice(bytes.get(pos..pos + hlen).ok_or_else(|| bad("short header"))?)?;
        pos += hlen;
        let mut arrays = BTreeMap::new();
        for (name, r, c) in header.arrays {
            let len = r * c;
            let raw = bytes.get(pos..pos + 8 * len).ok_or_else(|| bad("short data"))?;
            let v: Vec<f64> = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            arrays.insert(name, Array2::from_shape_vec((r, c), v).map_err(|_| bad("shape"))?);
            pos += 8 * len;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            key: header.key,
            meta: header.meta,
            arrays,
        })
    }

    /// Writes atomically (temporary file + rename) and returns the SHA-256 of the bytes.
    pub fn write(&self, path: &Path) -> Result<String> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let bytes = self.to_bytes();
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
        }
        fs::rename(&tmp, path)?;
        Ok(sha256_hex(&bytes))
    }

    /// Reads `path` if it exists and carries `key`; `Ok(None)` on a miss.
    pub fn read_if_matches(path: &Path, key: &str) -> Result<Option<(Self, String)>> {
        let mut f = match fs::File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        let store = Self::from_bytes(&bytes)?;
        if store.key != key {
            return Ok(None);
        }
        Ok(Some((store, sha256_hex(&bytes))))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Location of the cache file of `stage` under `dir`.
pub fn stage_path(dir: &Path, stage: &str, key: &str) -> PathBuf {
    dir.join("cache").join(format!("{stage}-{}.bin", &key[..16.min(key.len())]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bitwise() {
        let mut s = ColumnStore::new("k");
        s.meta = serde_json::json!({"n": 3});
        s.insert("a", Array2::from_shape_vec((2, 2), vec![1.0, f64::INFINITY, -0.0, 1e-300]).unwrap());
        s.insert_vec("v", &[0.1, 0.2]);
        let back = ColumnStore::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back.to_bytes(), s.to_bytes());
        let mut back = back;
        let a = back.take("a").unwrap();
        assert_eq!(a[[1, 0]].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn key_mismatch_is_a_miss() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        ColumnStore::new("one").write(&p).unwrap();
        assert!(ColumnStore::read_if_matches(&p, "two").unwrap().is_none());
        assert!(ColumnStore::read_if_matches(&p, "one").unwrap().is_some());
        assert!(ColumnStore::read_if_matches(&dir.path().join("none"), "one").unwrap().is_none());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut s = ColumnStore::new("k");
        s.insert_vec("v", &[1.0, 2.0]);
        let b = s.to_bytes();
        assert!(ColumnStore::from_bytes(&b[..b.len() - 3]).is_err());
    }
}
