//! Checkpoints: a JSON manifest (config and parameter table) next to a
//! binary file of concatenated tensor blobs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FluidConfig, FluidModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the encoded tensor in the blob file.
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config: FluidConfig,
    /// Blob file name, relative to the manifest.
    pub tensors: String,
    pub params: Vec<ParamEntry>,
}

/// Writes `path` (manifest) and `path` with extension `.bin` (tensors).
pub fn save_checkpoint(model: &FluidModel, path: &Path) -> Result<()> {
    let bin_path = path.with_extension("bin");
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(model.params.len());
    for id in model.params.ids() {
        let t = model.params.get(id);
        let offset = blob.len();
        t.write_to(&mut blob)?;
        entries.push(ParamEntry {
            name: model.params.name(id).to_string(),
            shape: t.shape().to_vec(),
            offset,
            bytes: blob.len() - offset,
        });
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        config: model.config().clone(),
        tensors: bin_path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Format(format!("bad checkpoint path {}", path.display())))?
            .to_string(),
        params: entries,
    };
    fs::write(&bin_path, &blob)?;
    fs::write(path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Rebuilds the model from the stored config and fills in every parameter.
pub fn load_checkpoint(path: &Path) -> Result<FluidModel> {
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(path)?)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", manifest.version)));
    }
    let blob = fs::read(path.with_file_name(&manifest.tensors))?;
    let mut model = FluidModel::new(manifest.config)?;
    if manifest.params.len() != model.params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, model expects {}",
            manifest.params.len(),
            model.params.len()
        )));
    }
    for e in &manifest.params {
        let id = model
            .params
            .find(&e.name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {}", e.name)))?;
        let bytes = blob
            .get(e.offset..e.offset + e.bytes)
            .ok_or_else(|| Error::Format(format!("parameter {} lies outside the blob", e.name)))?;
        let t = Tensor::from_bytes(bytes)?;
        if t.shape() != e.shape.as_slice() || t.shape() != model.params.get(id).shape() {
            return Err(Error::Format(format!("parameter {} has shape {:?}", e.name, t.shape())));
        }
        model.params.set(id, t)?;
    }
    Ok(model)
}
