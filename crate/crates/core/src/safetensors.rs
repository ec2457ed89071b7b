//! Minimal reader and writer for the safetensors container.
//!
//! Layout: little-endian `u64` header length, a JSON header mapping tensor
//! names to `{dtype, shape, data_offsets}`, then the raw byte buffer.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Reads every tensor, widening F32/F16/BF16 to `f64`.
pub fn read(path: &Path) -> Result<BTreeMap<String, NamedTensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

/// Parses an in-memory file; `path` only labels errors.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<BTreeMap<String, NamedTensor>> {
    parse(bytes).map_err(|m| format_err(path, m))
}

fn parse(bytes: &[u8]) -> std::result::Result<BTreeMap<String, NamedTensor>, String> {
    if bytes.len() < 8 {
        return Err("file shorter than its header length".into());
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let header = bytes
        .get(8..8 + n)
        .ok_or_else(|| "header length exceeds file size".to_string())?;
    let raw: BTreeMap<String, serde_json::Value> =
        serde_json::from_slice(header).map_err(|e| format!("bad header: {e}"))?;
    let buffer = &bytes[8 + n..];
    let mut out = BTreeMap::new();
    for (name, value) in raw {
        if name == "__metadata__" {
            continue;
        }
        let e: Entry = serde_json::from_value(value).map_err(|e| format!("bad entry '{name}': {e}"))?;
        let [start, end] = e.data_offsets;
        let slice = buffer
            .get(start..end)
            .filter(|_| start <= end)
            .ok_or_else(|| format!("'{name}' offsets out of range"))?;
        let count: usize = e.shape.iter().product();
        let width = match e.dtype.as_str() {
            "F64" => 8,
            "F32" => 4,
            "F16" | "BF16" => 2,
            other => return Err(format!("'{name}' has unsupported dtype {other}")),
        };
        if slice.len() != count * width {
            return Err(format!("'{name}' byte length does not match shape {:?}", e.shape));
        }
        let data: Vec<f64> = match e.dtype.as_str() {
            "F64" => slice
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            "F32" => slice
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            "F16" => slice
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f64())
                .collect(),
            _ => slice
                .chunks_exact(2)
                .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f64())
                .collect(),
        };
        out.insert(name, NamedTensor { shape: e.shape, data });
    }
    Ok(out)
}

/// Serialises tensors as F64 in name order.
pub fn to_bytes<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a [usize], &'a [f64])>) -> Vec<u8> {
    let mut header = BTreeMap::new();
    let mut buffer = Vec::new();
    let mut items: Vec<_> = tensors.into_iter().collect();
    items.sort_by(|a, b| a.0.cmp(b.0));
    for (name, shape, data) in items {
        let start = buffer.len();
        for v in data {
            buffer.extend_from_slice(&v.to_le_bytes());
        }
        header.insert(
            name.to_string(),
            Entry {
                dtype: "F64".into(),
                shape: shape.to_vec(),
                data_offsets: [start, buffer.len()],
            },
        );
    }
    let mut json = serde_json::to_vec(&header).expect("header serialises");
    while json.len() % 8 != 0 {
        json.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + json.len() + buffer.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&buffer);
    out
}
