//! Content-addressed artifact store.
//!
//! An entry lives in `<root>/<kind>/<key>/` and holds its files, one
//! `<file>.sha256` checksum per file, and `inputs.json` with the inputs the
//! key was derived from. Files are written to a temporary name and renamed,
//! and the checksum is written last, so readers never observe a partial file
//! as complete.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::corpus::write_file;
use crate::error::{Error, Result};

/// Bumped whenever cached artifacts change meaning.
pub const CACHE_TAG: &str = "nmtprobe-cache-1";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug)]
pub struct ArtifactCache {
    root: PathBuf,
}

#[derive(Serialize)]
struct KeyInput<'a, T: Serialize> {
    tag: &'a str,
    version: &'a str,
    kind: &'a str,
    inputs: &'a T,
}

impl ArtifactCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ArtifactCache { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Key of an entry: hash of the canonical JSON of `inputs`, the kind,
    /// the cache tag and the crate version.
    pub fn key<T: Serialize>(kind: &str, inputs: &T) -> String {
        let body = serde_json::to_vec(&KeyInput {
            tag: CACHE_TAG,
            version: env!("CARGO_PKG_VERSION"),
            kind,
            inputs,
        })
        .expect("plain data");
        sha256_hex(&body)
    }

    pub fn entry_dir(&self, kind: &str, key: &str) -> PathBuf {
        self.root.join(kind).join(key)
    }

    /// Whether every file in `names` is present with a checksum.
    pub fn has(&self, kind: &str, key: &str, names: &[&str]) -> bool {
        let dir = self.entry_dir(kind, key);
        names
            .iter()
            .all(|n| dir.join(n).is_file() && dir.join(format!("{n}.sha256")).is_file())
    }

    /// Reads a file, verifying its checksum. `Ok(None)` if it was never
    /// completed.
    pub fn get(&self, kind: &str, key: &str, name: &str) -> Result<Option<Vec<u8>>> {
        let dir = self.entry_dir(kind, key);
        let (path, sum_path) = (dir.join(name), dir.join(format!("{name}.sha256")));
        if !sum_path.is_file() {
            return Ok(None);
        }
        let expected = fs::read_to_string(&sum_path).map_err(|e| Error::io(&sum_path, e))?;
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::Integrity(format!("{} has a checksum but no data", path.display())))
            }
            Err(e) => return Err(Error::io(&path, e)),
        };
        if sha256_hex(&bytes) != expected.trim() {
            return Err(Error::Integrity(format!("{} does not match its checksum", path.display())));
        }
        Ok(Some(bytes))
    }

    /// Reads a file that must exist.
    pub fn require(&self, kind: &str, key: &str, name: &str) -> Result<Vec<u8>> {
        self.get(kind, key, name)?.ok_or_else(|| {
            Error::Integrity(format!(
                "{} is missing",
                self.entry_dir(kind, key).join(name).display()
            ))
        })
    }

    pub fn put(&self, kind: &str, key: &str, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let dir = self.entry_dir(kind, key);
        let path = dir.join(name);
        let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
        write_file(&tmp, bytes)?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        let sum_path = dir.join(format!("{name}.sha256"));
        let sum_tmp = dir.join(format!(".{name}.sha256.{}.tmp", std::process::id()));
        write_file(&sum_tmp, sha256_hex(bytes).as_bytes())?;
        fs::rename(&sum_tmp, &sum_path).map_err(|e| Error::io(&sum_path, e))?;
        Ok(path)
    }

    /// Records what an entry's key was derived from, for inspection.
    pub fn put_inputs<T: Serialize>(&self, kind: &str, key: &str, inputs: &T) -> Result<()> {
        let mut body = serde_json::to_string_pretty(inputs).expect("plain data");
        body.push('\n');
        self.put(kind, key, "inputs.json", body.as_bytes()).map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let c = ArtifactCache::new(dir.path());
        let key = ArtifactCache::key("model", &("a", 1));
        assert_eq!(key, ArtifactCache::key("model", &("a", 1)));
        assert_ne!(key, ArtifactCache::key("model", &("a", 2)));
        assert_ne!(key, ArtifactCache::key("probe", &("a", 1)));
        assert_eq!(c.get("model", &key, "x.bin").unwrap(), None);
        assert!(!c.has("model", &key, &["x.bin"]));
        let p = c.put("model", &key, "x.bin", b"hello").unwrap();
        assert!(c.has("model", &key, &["x.bin"]));
        assert_eq!(c.get("model", &key, "x.bin").unwrap().unwrap(), b"hello");
        fs::write(&p, b"hellO").unwrap();
        assert_eq!(c.get("model", &key, "x.bin").unwrap_err().category(), "integrity");
        fs::remove_file(&p).unwrap();
        assert_eq!(c.get("model", &key, "x.bin").unwrap_err().category(), "integrity");
        assert_eq!(c.require("model", &key, "y.bin").unwrap_err().category(), "integrity");
    }
}
