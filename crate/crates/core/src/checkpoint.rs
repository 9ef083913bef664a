//! Checkpoint encoding: a UTF-8 JSON manifest (`[{name, shape, dtype}, ...]`),
//! one NUL byte, then each tensor's little-endian buffer in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

pub fn encode<T: Float>(store: &ParamStore<T>) -> Vec<u8> {
    let manifest: Vec<ManifestEntry> = store
        .names()
        .iter()
        .zip(store.tensors())
        .map(|(name, t)| ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
        })
        .collect();
    let mut out = serde_json::to_vec(&manifest).expect("manifest serializes");
    out.push(0);
    for t in store.tensors() {
        for &x in t.data() {
            match T::DTYPE {
                "f64" => out.extend_from_slice(&x.as_f64().to_le_bytes()),
                _ => out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes()),
            }
        }
    }
    out
}

pub fn decode<T: Float>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let nul = bytes
        .iter()
        .position(|&b| b == 0)
        .ok_or_else(|| Error::Checkpoint("missing manifest terminator".into()))?;
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&bytes[..nul])
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    let mut pos = nul + 1;
    let mut out = Vec::with_capacity(manifest.len());
    for entry in manifest {
        let n: usize = entry.shape.iter().product();
        let width = match entry.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
        };
        let end = pos + n * width;
        let buf = bytes
            .get(pos..end)
            .ok_or_else(|| Error::Checkpoint(format!("truncated buffer for {}", entry.name)))?;
        let data: Vec<T> = if width == 4 {
            buf.chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect()
        } else {
            buf.chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
                .collect()
        };
        pos = end;
        out.push((entry.name, Tensor::new(entry.shape, data)?));
    }
    if pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(out)
}

pub fn save<T: Float>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Float>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
