//! Parameter files: the 8-byte magic `PHTENSOR`, a `u32` little-endian
//! header length, a JSON header, then raw little-endian `f32` data for each
//! tensor in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};

pub const MAGIC: &[u8; 8] = b"PHTENSOR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    /// Free-form description of what the file holds (network name,
    /// resolution, optimizer step, ...).
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn corrupt(path: &Path, offset: u64, detail: impl Into<String>) -> TensorError {
    TensorError::Checkpoint { path: path.to_path_buf(), offset, detail: detail.into() }
}

pub fn encode(meta: &serde_json::Value, tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        meta: meta.clone(),
        tensors: tensors.iter().map(|t| TensorEntry { name: t.name.clone(), shape: t.shape.clone() }).collect(),
    };
    for t in tensors {
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(TensorError::Shape {
                op: "checkpoint",
                detail: format!("{}: shape {:?} vs {} values", t.name, t.shape, t.data.len()),
            });
        }
    }
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + tensors.iter().map(|t| 4 * t.data.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<(CheckpointHeader, Vec<NamedTensor>)> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(corrupt(path, 0, "missing PHTENSOR magic"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = 12 + hlen;
    if bytes.len() < body {
        return Err(corrupt(path, 8, format!("header length {hlen} exceeds file size")));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[12..body]).map_err(|e| corrupt(path, 12, format!("invalid header JSON: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(corrupt(path, 12, format!("unsupported version {} (expected {FORMAT_VERSION})", header.version)));
    }
    let mut offset = body;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = offset + 4 * n;
        if end > bytes.len() {
            return Err(corrupt(
                path,
                offset as u64,
                format!(
                    "payload for '{}' truncated: need {} bytes, {} remain",
                    entry.name,
                    4 * n,
                    bytes.len() - offset
                ),
            ));
        }
        let data = bytes[offset..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(NamedTensor { name: entry.name.clone(), shape: entry.shape.clone(), data });
        offset = end;
    }
    if offset != bytes.len() {
        return Err(corrupt(path, offset as u64, format!("{} trailing bytes after last tensor", bytes.len() - offset)));
    }
    Ok((header, tensors))
}

pub fn write_checkpoint(path: &Path, meta: &serde_json::Value, tensors: &[NamedTensor]) -> Result<()> {
    let bytes = encode(meta, tensors)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<NamedTensor>)> {
    let bytes = fs::read(path)?;
    decode(path, &bytes)
}
