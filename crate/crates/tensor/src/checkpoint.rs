//! Single-file parameter checkpoints.
//!
//! Byte layout (all integers little-endian):
//!
//! | offset     | size | content                                  |
//! |------------|------|------------------------------------------|
//! | 0          | 8    | magic `SFDACKPT`                         |
//! | 8          | 4    | format version, `u32` (currently 1)      |
//! | 12         | 8    | manifest length `L`, `u64`               |
//! | 20         | L    | UTF-8 JSON manifest                      |
//! | 20 + L     | rest | tensor blob, `f32` LE, manifest order    |
//!
//! Each manifest tensor record carries `offset`/`nbytes` relative to the start
//! of the blob. Records must tile the blob exactly, in order, with no gaps and
//! no trailing bytes. Tensors are always stored as 32-bit floats regardless
//! of the in-memory precision.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::{ParamKind, ParamSet};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SFDACKPT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub group: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: String,
    pub tensors: Vec<TensorRecord>,
    pub frozen: Vec<String>,
    pub blob_bytes: u64,
    /// Caller-supplied description, e.g. the model architecture.
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamSet<f32>,
    pub meta: serde_json::Value,
}

fn format_err(offset: usize, detail: impl Into<String>) -> TensorError {
    TensorError::Format {
        offset,
        detail: detail.into(),
    }
}

pub fn encode_checkpoint<T: Real>(params: &ParamSet<T>, meta: &serde_json::Value) -> Vec<u8> {
    let mut blob = Vec::with_capacity(params.num_scalars() * 4);
    let mut tensors = Vec::with_capacity(params.len());
    for e in params.entries() {
        let offset = blob.len() as u64;
        for &v in e.tensor.data() {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        tensors.push(TensorRecord {
            name: e.name.clone(),
            group: e.group.clone(),
            kind: e.kind,
            shape: e.tensor.shape().to_vec(),
            offset,
            nbytes: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        dtype: "f32".to_string(),
        tensors,
        frozen: params.frozen_groups().map(str::to_string).collect(),
        blob_bytes: blob.len() as u64,
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(
            bytes.len(),
            format!("file is {} bytes, header needs {}", bytes.len(), HEADER_LEN),
        ));
    }
    if &bytes[..8] != MAGIC {
        return Err(format_err(0, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(format_err(8, format!("unsupported version {}", version)));
    }
    let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let blob_start = (HEADER_LEN as u64)
        .checked_add(manifest_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| {
            format_err(
                12,
                format!("manifest length {} exceeds file size {}", manifest_len, bytes.len()),
            )
        })? as usize;
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..blob_start])
        .map_err(|e| format_err(HEADER_LEN + e.column(), format!("manifest: {}", e)))?;
    if manifest.dtype != "f32" {
        return Err(format_err(
            HEADER_LEN,
            format!("unsupported dtype `{}`", manifest.dtype),
        ));
    }
    let blob = &bytes[blob_start..];
    if manifest.blob_bytes != blob.len() as u64 {
        return Err(format_err(
            blob_start,
            format!("blob: expected {} bytes, found {}", manifest.blob_bytes, blob.len()),
        ));
    }
    let mut params = ParamSet::new();
    let mut cursor = 0u64;
    for rec in &manifest.tensors {
        let numel = rec
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| format_err(blob_start, format!("`{}`: shape {:?} overflows", rec.name, rec.shape)))?;
        if rec.offset != cursor || numel.checked_mul(4) != Some(rec.nbytes) {
            return Err(format_err(
                blob_start + cursor as usize,
                format!(
                    "`{}`: record (offset {}, {} bytes) inconsistent with shape {:?} at blob offset {}",
                    rec.name, rec.offset, rec.nbytes, rec.shape, cursor
                ),
            ));
        }
        let end = cursor
            .checked_add(rec.nbytes)
            .filter(|&e| e <= blob.len() as u64)
            .ok_or_else(|| {
                format_err(
                    blob_start + cursor as usize,
                    format!("`{}` runs past the blob", rec.name),
                )
            })?;
        let data: Vec<f32> = blob[cursor as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(rec.shape.clone(), data)
            .map_err(|e| format_err(blob_start + cursor as usize, e.to_string()))?;
        params
            .insert(&rec.name, &rec.group, rec.kind, tensor)
            .map_err(|e| format_err(HEADER_LEN, e.to_string()))?;
        cursor = end;
    }
    if cursor != blob.len() as u64 {
        return Err(format_err(
            blob_start + cursor as usize,
            format!("{} trailing blob bytes", blob.len() as u64 - cursor),
        ));
    }
    for g in &manifest.frozen {
        params.freeze(g);
    }
    Ok(Checkpoint {
        params,
        meta: manifest.meta,
    })
}

pub fn save_checkpoint<T: Real>(path: &Path, params: &ParamSet<T>, meta: &serde_json::Value) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params, meta))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}
