//! Binary tensor dumps and named-tensor checkpoints.
//!
//! A dump is little-endian: `rank: u64`, then `rank` dims as `u64`, then the
//! values as IEEE-754 `f64` in row-major order. A checkpoint is a sequence of
//! dumps in one file plus a JSON manifest naming each tensor, its shape and
//! its byte offset.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Tensor};

pub fn header_len(rank: usize) -> usize {
    8 * (1 + rank)
}

pub fn encoded_len(t: &Tensor) -> usize {
    header_len(t.rank()) + 8 * t.len()
}

pub fn encode_into(t: &Tensor, out: &mut Vec<u8>) {
    out.reserve(encoded_len(t));
    out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::new();
    encode_into(t, &mut out);
    out
}

fn read_u64(bytes: &[u8], at: usize) -> Result<u64> {
    let chunk = bytes
        .get(at..at + 8)
        .ok_or_else(|| Error::Format(format!("truncated tensor dump at byte {at}")))?;
    Ok(u64::from_le_bytes(chunk.try_into().expect("8 bytes")))
}

/// Decodes one dump from the front of `bytes`, returning it and the bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let rank = read_u64(bytes, 0)? as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(read_u64(bytes, 8 * (1 + i))? as usize);
    }
    let n: usize = shape.iter().product();
    let start = header_len(rank);
    let end = start + 8 * n;
    let body = bytes
        .get(start..end)
        .ok_or_else(|| Error::Format(format!("dump body needs {} bytes", end - start)))?;
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((Tensor::new(shape, data)?, end))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - used
        )));
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub tensors: Vec<ManifestEntry>,
    /// Free-form metadata (hyperparameters, model config).
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub const CHECKPOINT_FORMAT: &str = "tensor-dump-v1";

/// Path of the manifest that accompanies a checkpoint data file.
pub fn manifest_path(data_path: &Path) -> PathBuf {
    let mut name = data_path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

pub fn write_checkpoint(
    data_path: &Path,
    tensors: &[(String, &Tensor)],
    meta: serde_json::Value,
) -> Result<CheckpointManifest> {
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: bytes.len(),
        });
        encode_into(t, &mut bytes);
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        tensors: entries,
        meta,
    };
    fs::write(data_path, &bytes).map_err(|e| Error::io(data_path, e))?;
    let mpath = manifest_path(data_path);
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn read_checkpoint(data_path: &Path) -> Result<(CheckpointManifest, Vec<(String, Tensor)>)> {
    let mpath = manifest_path(data_path);
    let mbytes = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&mbytes)
        .map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("unknown checkpoint format {}", manifest.format)));
    }
    let bytes = fs::read(data_path).map_err(|e| Error::io(data_path, e))?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let slice = bytes
            .get(entry.offset..)
            .ok_or_else(|| Error::Format(format!("offset of {} past end", entry.name)))?;
        let (t, _) = decode(slice)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Format(format!(
                "{}: manifest shape {:?} but data shape {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        out.push((entry.name.clone(), t));
    }
    Ok((manifest, out))
}
