//! On-disk feature sets.
//!
//! Layout of a feature file:
//!
//! ```text
//! <header JSON>\n                 one line, see `FeatureHeader`
//! rows * dim little-endian f32    row-major vectors
//! ```
//!
//! Row metadata lives in a tab-separated sidecar `<file>.meta.tsv` with the
//! columns `label tag token sentence position frequency seen`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExtractionSpec;
use crate::corpus::write_file;
use crate::error::{Error, Result};

pub const FEATURE_FORMAT: &str = "nmtprobe-features";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureRow {
    /// Index into the set's tagset.
    pub label: u32,
    pub token: String,
    pub sentence: usize,
    pub position: usize,
    /// Occurrences of the token in the MT training data.
    pub frequency: u64,
    /// Whether the token is in the MT vocabulary.
    pub seen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureHeader {
    pub format: String,
    pub version: u32,
    pub spec: ExtractionSpec,
    pub tagset: Vec<String>,
    pub dim: usize,
    pub rows: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub spec: ExtractionSpec,
    pub tagset: Vec<String>,
    pub dim: usize,
    pub rows: Vec<FeatureRow>,
    data: Vec<f32>,
}

impl FeatureSet {
    pub fn new(spec: ExtractionSpec, tagset: Vec<String>, dim: usize, rows: Vec<FeatureRow>, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows.len() * dim {
            return Err(Error::Data(format!(
                "{} values for {} rows of dimension {dim}",
                data.len(),
                rows.len()
            )));
        }
        if let Some(r) = rows.iter().find(|r| r.label as usize >= tagset.len()) {
            return Err(Error::Data(format!("label {} outside tagset of size {}", r.label, tagset.len())));
        }
        Ok(FeatureSet {
            spec,
            tagset,
            dim,
            rows,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn tag(&self, i: usize) -> &str {
        &self.tagset[self.rows[i].label as usize]
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> FeatureSet {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.vector(i));
        }
        FeatureSet {
            spec: self.spec.clone(),
            tagset: self.tagset.clone(),
            dim: self.dim,
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            data,
        }
    }

    pub fn header(&self) -> FeatureHeader {
        FeatureHeader {
            format: FEATURE_FORMAT.into(),
            version: FEATURE_VERSION,
            spec: self.spec.clone(),
            tagset: self.tagset.clone(),
            dim: self.dim,
            rows: self.rows.len(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.header()).expect("plain data");
        out.push(b'\n');
        out.reserve(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn meta_tsv(&self) -> String {
        let mut s = String::from("label\ttag\ttoken\tsentence\tposition\tfrequency\tseen\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.label, self.tagset[r.label as usize], r.token, r.sentence, r.position, r.frequency, r.seen as u8
            ));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())?;
        write_file(&meta_path(path), self.meta_tsv().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let meta_p = meta_path(path);
        let meta = fs::read_to_string(&meta_p).map_err(|e| Error::io(&meta_p, e))?;
        Self::from_parts(&bytes, &meta, path)
    }

    /// Parses a feature payload and its metadata table; `path` only labels
    /// errors.
    pub fn from_parts(bytes: &[u8], meta: &str, path: &Path) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Parse {
            path: path.display().to_string(),
            line,
            msg,
        };
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad(1, "missing header line".into()))?;
        let header: FeatureHeader = serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(1, e.to_string()))?;
        if header.format != FEATURE_FORMAT || header.version != FEATURE_VERSION {
            return Err(bad(1, format!("unsupported format {} v{}", header.format, header.version)));
        }
        let payload = &bytes[nl + 1..];
        if payload.len() != header.rows * header.dim * 4 {
            return Err(Error::Integrity(format!(
                "{}: payload has {} bytes, header announces {} rows of dimension {}",
                path.display(),
                payload.len(),
                header.rows,
                header.dim
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let meta_p = meta_path(path);
        let mut rows = Vec::with_capacity(header.rows);
        for (i, line) in meta.lines().enumerate().skip(1) {
            let bad = |msg: &str| Error::Parse {
                path: meta_p.display().to_string(),
                line: i + 1,
                msg: msg.to_string(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(bad("expected 7 tab-separated fields"));
            }
            let num = |s: &str| s.parse::<u64>().map_err(|_| bad("malformed number"));
            rows.push(FeatureRow {
                label: num(f[0])? as u32,
                token: f[2].to_string(),
                sentence: num(f[3])? as usize,
                position: num(f[4])? as usize,
                frequency: num(f[5])?,
                seen: f[6] == "1",
            });
        }
        if rows.len() != header.rows {
            return Err(Error::Integrity(format!(
                "{}: {} metadata rows for {} vectors",
                meta_p.display(),
                rows.len(),
                header.rows
            )));
        }
        FeatureSet::new(header.spec, header.tagset, header.dim, rows, data)
    }
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.tsv");
    PathBuf::from(s)
}
