//! `model.json` + `model.bin`.
//!
//! The manifest lists every layer's spec together with the byte offsets of
//! its weights (OIHW) and biases inside the blob. The blob is a flat run of
//! little-endian `f32`; values are widened to `f64` on load, so a model whose
//! parameters are `f32`-representable round-trips bit-exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Block, Layer, ModelGraph};
use crate::error::{Error, Result};
use crate::nn::LayerSpec;
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub spec: LayerSpec,
    pub weights_offset: u64,
    pub weights_len: u64,
    pub bias_offset: u64,
    pub bias_len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub schema_version: u32,
    /// Blob file name, relative to the manifest's directory.
    pub blob: String,
    pub blob_bytes: u64,
    pub sha256: String,
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerEntry>,
    pub blocks: Vec<Block>,
}

fn blob_path(manifest_path: &Path, blob: &str) -> PathBuf {
    manifest_path.parent().unwrap_or_else(|| Path::new(".")).join(blob)
}

/// Writes `path` (the manifest) and a blob next to it named after the
/// manifest's stem with a `.bin` extension.
pub fn save_model(g: &ModelGraph, path: &Path) -> Result<()> {
    g.validate()?;
    let mut blob = Vec::new();
    let mut layers = Vec::with_capacity(g.layers.len());
    let push = |values: &[f64], blob: &mut Vec<u8>| -> (u64, u64) {
        let offset = blob.len() as u64;
        for &v in values {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        (offset, values.len() as u64)
    };
    for l in &g.layers {
        let (weights_offset, weights_len) = push(l.weights.data(), &mut blob);
        let (bias_offset, bias_len) = push(&l.bias, &mut blob);
        layers.push(LayerEntry {
            spec: l.spec.clone(),
            weights_offset,
            weights_len,
            bias_offset,
            bias_len,
        });
    }

    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let blob_name = format!("{stem}.bin");
    let manifest = ModelManifest {
        schema_version: SCHEMA_VERSION,
        blob: blob_name.clone(),
        blob_bytes: blob.len() as u64,
        sha256: hex::encode(Sha256::digest(&blob)),
        input_shape: g.input_shape,
        layers,
        blocks: g.blocks.clone(),
    };
    let bin = blob_path(path, &blob_name);
    fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_f32s(blob: &[u8], offset: u64, len: u64, what: &str) -> Result<Vec<f64>> {
    let start = offset as usize;
    let end = len
        .checked_mul(4)
        .and_then(|b| offset.checked_add(b))
        .map(|e| e as usize)
        .filter(|&e| e <= blob.len())
        .ok_or_else(|| {
            Error::Consistency(format!(
                "{what} at bytes {offset}+{}x4 lies outside the {}-byte blob",
                len,
                blob.len()
            ))
        })?;
    if !offset.is_multiple_of(4) {
        return Err(Error::Consistency(format!("{what} offset {offset} is not 4-byte aligned")));
    }
    Ok(blob[start..end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

pub fn load_model(path: &Path) -> Result<ModelGraph> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let version: serde_json::Value = serde_json::from_str(&text)?;
    let found = version.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != SCHEMA_VERSION {
        return Err(Error::UnsupportedSchema {
            found,
            supported: SCHEMA_VERSION,
        });
    }
    let manifest: ModelManifest = serde_json::from_value(version)?;

    let bin = blob_path(path, &manifest.blob);
    let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(Error::ByteCount {
            expected: manifest.blob_bytes,
            actual: blob.len() as u64,
        });
    }
    let digest = hex::encode(Sha256::digest(&blob));
    if digest != manifest.sha256 {
        return Err(Error::ChecksumMismatch {
            expected: manifest.sha256,
            actual: digest,
        });
    }

    let mut layers = Vec::with_capacity(manifest.layers.len());
    let mut used = 0u64;
    for (i, entry) in manifest.layers.iter().enumerate() {
        entry.spec.validate()?;
        let expected = entry.spec.params() as u64;
        if entry.weights_len != expected || entry.bias_len != entry.spec.out_channels as u64 {
            return Err(Error::Consistency(format!(
                "layer {i} lists {} weights and {} biases, its spec needs {expected} and {}",
                entry.weights_len, entry.bias_len, entry.spec.out_channels
            )));
        }
        let weights = read_f32s(&blob, entry.weights_offset, entry.weights_len, &format!("layer {i} weights"))?;
        let bias = read_f32s(&blob, entry.bias_offset, entry.bias_len, &format!("layer {i} bias"))?;
        used += 4 * (entry.weights_len + entry.bias_len);
        layers.push(Layer {
            weights: Tensor::new(entry.spec.weight_shape().to_vec(), weights)?,
            spec: entry.spec.clone(),
            bias,
        });
    }
    if used != manifest.blob_bytes {
        return Err(Error::Consistency(format!(
            "layers account for {used} bytes of a {}-byte blob",
            manifest.blob_bytes
        )));
    }
    ModelGraph::new(manifest.input_shape, layers, manifest.blocks)
}
