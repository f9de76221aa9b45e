//! Parameter checkpoints: a named-array container with a JSON manifest of
//! `(name, shape, byte offset)` entries followed by a flat little-endian
//! 64-bit payload. Round trips are bit-exact for `f64` parameters.

use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"HDRCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("corrupt manifest: {0}")]
    BadManifest(String),
    #[error("array {name}: payload range {offset}..{end} out of bounds ({len} bytes)")]
    BadRange {
        name: String,
        offset: usize,
        end: usize,
        len: usize,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// byte offset into the payload section
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    arrays: Vec<ArrayEntry>,
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write named arrays; values are widened to `f64` on the way out.
pub fn save<F: Scalar>(params: &ParamSet<F>, path: &Path) -> Result<(), CheckpointError> {
    let mut entries = Vec::with_capacity(params.len());
    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor) in params.iter() {
        entries.push(ArrayEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for &v in tensor.data() {
            payload.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    let manifest = serde_json::to_vec(&Manifest { arrays: entries })
        .map_err(|e| CheckpointError::BadManifest(e.to_string()))?;

    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(MAGIC).map_err(|e| io_err(path, e))?;
    out.write_all(&(manifest.len() as u64).to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    out.write_all(&manifest).map_err(|e| io_err(path, e))?;
    out.write_all(&payload).map_err(|e| io_err(path, e))?;
    out.flush().map_err(|e| io_err(path, e))
}

/// Read back every named array.
pub fn load<F: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<F>)>, CheckpointError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = BufReader::new(file);
    let mut magic = [0u8; 8];
    reader.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut len_bytes = [0u8; 8];
    reader
        .read_exact(&mut len_bytes)
        .map_err(|e| io_err(path, e))?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    reader
        .read_exact(&mut manifest_bytes)
        .map_err(|e| io_err(path, e))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| CheckpointError::BadManifest(e.to_string()))?;
    let mut payload = Vec::new();
    reader
        .read_to_end(&mut payload)
        .map_err(|e| io_err(path, e))?;

    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for entry in manifest.arrays {
        let numel: usize = entry.shape.iter().product();
        let offset = entry.offset as usize;
        let end = offset + numel * 8;
        if end > payload.len() {
            return Err(CheckpointError::BadRange {
                name: entry.name,
                offset,
                end,
                len: payload.len(),
            });
        }
        let data: Vec<F> = payload[offset..end]
            .chunks_exact(8)
            .map(|c| {
                let bits = u64::from_le_bytes(c.try_into().expect("chunk of 8"));
                F::from_f64_const(f64::from_bits(bits))
            })
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| CheckpointError::BadManifest(e.to_string()))?;
        arrays.push((entry.name, tensor));
    }
    Ok(arrays)
}

/// Load a checkpoint into an existing parameter set (shapes must match).
pub fn restore<F: Scalar>(params: &mut ParamSet<F>, path: &Path) -> Result<(), CheckpointError> {
    let arrays = load::<F>(path)?;
    params
        .assign(&arrays)
        .map_err(CheckpointError::BadManifest)
}
