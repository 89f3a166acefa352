//! Checkpoint directory: `config.json`, `manifest.json`, `weights.bin`
//! (little-endian f32, concatenated in manifest order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{tensor_layout, EmbeddingModel, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the weights file.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<ManifestEntry>,
}

/// Writes named tensors as `<stem>.json` manifest plus `<stem>.bin` payload.
pub(crate) fn write_bundle(dir: &Path, manifest_name: &str, bin_name: &str, tensors: &[(String, &Tensor<f32>)]) -> Result<()> {
    let mut bytes = Vec::with_capacity(tensors.iter().map(|(_, t)| t.numel() * 4).sum());
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: bytes.len(),
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join(bin_name), bytes)?;
    let manifest = Manifest { tensors: entries };
    fs::write(dir.join(manifest_name), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub(crate) fn read_bundle(dir: &Path, manifest_name: &str, bin_name: &str) -> Result<Vec<(String, Tensor<f32>)>> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(manifest_name))?)?;
    let bytes = fs::read(dir.join(bin_name))?;
    let expected: usize = manifest
        .tensors
        .iter()
        .map(|e| e.shape.iter().product::<usize>() * 4)
        .sum();
    if bytes.len() != expected {
        return Err(Error::Checkpoint(format!(
            "{bin_name} holds {} bytes, manifest describes {expected}",
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(manifest.tensors.len());
    let mut cursor = 0;
    for e in manifest.tensors {
        if e.offset != cursor {
            return Err(Error::Checkpoint(format!(
                "tensor {} starts at byte {}, expected {cursor}",
                e.name, e.offset
            )));
        }
        let n: usize = e.shape.iter().product();
        let data = bytes[cursor..cursor + n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        cursor += n * 4;
        out.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok(out)
}

pub fn save_checkpoint(model: &EmbeddingModel<f32>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&model.config)?)?;
    write_bundle(dir, "manifest.json", "weights.bin", &model.named_tensors())
}

pub fn load_checkpoint(dir: &Path) -> Result<EmbeddingModel<f32>> {
    let config: ModelConfig = serde_json::from_slice(&fs::read(dir.join("config.json"))?)?;
    config.validate()?;
    let named = read_bundle(dir, "manifest.json", "weights.bin")?;
    let layout = tensor_layout(&config);
    if named.len() != layout.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, config implies {}",
            named.len(),
            layout.len()
        )));
    }
    for ((name, t), (want_name, want_shape)) in named.iter().zip(&layout) {
        if name != want_name || t.shape() != want_shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "manifest entry {name} {:?} does not match expected {want_name} {want_shape:?}",
                t.shape()
            )));
        }
    }
    EmbeddingModel::from_tensors(config, named.into_iter().map(|(_, t)| t).collect())
}
