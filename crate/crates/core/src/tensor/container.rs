//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! bytes 0..8     magic "NMTPCKPT"
//! bytes 8..12    u32 format version
//! bytes 12..20   u64 header length H
//! next H bytes   UTF-8 JSON ContainerHeader
//! rest           f32 payload; tensor i occupies [offset, offset + len) elements
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

pub const CONTAINER_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"NMTPCKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn io(e: std::io::Error) -> TensorError {
    TensorError::Format(format!("io: {e}"))
}

pub fn write_container<W: Write>(
    w: &mut W,
    kind: &str,
    meta: serde_json::Value,
    tensors: &[(&str, &Tensor<f32>)],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len();
    }
    let header = ContainerHeader {
        kind: kind.to_string(),
        meta,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| TensorError::Format(e.to_string()))?;
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    let mut buf = Vec::with_capacity(offset * 4);
    for (_, t) in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(io)?;
    Ok(())
}

pub fn read_container<R: Read>(r: &mut R) -> Result<(ContainerHeader, Vec<(String, Tensor<f32>)>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(TensorError::Format("bad magic".into()));
    }
    let mut u4 = [0u8; 4];
    r.read_exact(&mut u4).map_err(io)?;
    let version = u32::from_le_bytes(u4);
    if version != CONTAINER_VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let mut u8b = [0u8; 8];
    r.read_exact(&mut u8b).map_err(io)?;
    let hlen = u64::from_le_bytes(u8b) as usize;
    let mut json = vec![0u8; hlen];
    r.read_exact(&mut json).map_err(io)?;
    let header: ContainerHeader =
        serde_json::from_slice(&json).map_err(|e| TensorError::Format(format!("header: {e}")))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(io)?;
    if payload.len() % 4 != 0 {
        return Err(TensorError::Format("truncated payload".into()));
    }
    let floats: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if e.offset + e.len > floats.len() {
            return Err(TensorError::Format(format!("tensor {} exceeds payload", e.name)));
        }
        let t = Tensor::new(e.shape.clone(), floats[e.offset..e.offset + e.len].to_vec())
            .map_err(|err| TensorError::Format(format!("tensor {}: {err}", e.name)))?;
        out.push((e.name.clone(), t));
    }
    Ok((header, out))
}
