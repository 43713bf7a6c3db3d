//! Checkpoint directory: `checkpoint.json` (names, shapes, offsets, model
//! config, training config, seed) plus `params.bin`, every parameter tensor
//! as little-endian f64 concatenated in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::{Model, ModelConfig};
use crate::tensor::{Tensor, BYTE_ORDER_LE, DTYPE_F64};
use crate::train::TrainConfig;

pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const CHECKPOINT_FORMAT: &str = "covseg-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `params.bin`.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub dtype: String,
    pub byte_order: String,
    pub model: ModelConfig,
    pub init_seed: u64,
    pub train: Option<TrainConfig>,
    pub tensors: Vec<TensorEntry>,
}

fn manifest_for(model: &Model, init_seed: u64, train: Option<&TrainConfig>) -> (CheckpointManifest, Vec<u8>) {
    let mut blob = Vec::with_capacity(model.store.total_scalars() * 8);
    let tensors = model
        .store
        .iter()
        .map(|(name, t)| {
            let entry = TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset: blob.len(),
            };
            blob.extend_from_slice(&t.to_bytes());
            entry
        })
        .collect();
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        dtype: DTYPE_F64.to_string(),
        byte_order: BYTE_ORDER_LE.to_string(),
        model: model.config.clone(),
        init_seed,
        train: train.cloned(),
        tensors,
    };
    (manifest, blob)
}

pub fn save(dir: &Path, model: &Model, init_seed: u64, train: Option<&TrainConfig>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (manifest, blob) = manifest_for(model, init_seed, train);
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    let path = dir.join(PARAMS_FILE);
    fs::write(&path, blob).map_err(|e| Error::io(&path, e))
}

/// Restores a model, checking every tensor name and shape against a freshly
/// built model of the recorded configuration.
pub fn load(dir: &Path) -> Result<(Model, CheckpointManifest)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if manifest.format != CHECKPOINT_FORMAT
        || manifest.dtype != DTYPE_F64
        || manifest.byte_order != BYTE_ORDER_LE
    {
        return Err(Error::data(format!(
            "{}: unsupported checkpoint format {:?} ({}, {})",
            path.display(),
            manifest.format,
            manifest.dtype,
            manifest.byte_order
        )));
    }
    let blob_path = dir.join(PARAMS_FILE);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut model = Model::new(manifest.model.clone(), manifest.init_seed)?;
    if manifest.tensors.len() != model.store.len() {
        return Err(Error::data(format!(
            "{}: {} tensors recorded, model has {}",
            path.display(),
            manifest.tensors.len(),
            model.store.len()
        )));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for (entry, (name, expected)) in manifest.tensors.iter().zip(model.store.iter()) {
        if entry.name != name || entry.shape != expected.shape() {
            return Err(Error::data(format!(
                "{}: tensor {} {:?} does not match model tensor {} {:?}",
                path.display(),
                entry.name,
                entry.shape,
                name,
                expected.shape()
            )));
        }
        let len = expected.numel() * 8;
        let bytes = entry
            .offset
            .checked_add(len)
            .and_then(|end| blob.get(entry.offset..end))
            .ok_or_else(|| {
                Error::data(format!(
                    "{}: tensor {} extends past the end of the payload",
                    blob_path.display(),
                    entry.name
                ))
            })?;
        tensors.push(Tensor::from_bytes(&entry.shape, bytes)?);
    }
    let used: usize = model.store.total_scalars() * 8;
    if blob.len() != used {
        return Err(Error::data(format!(
            "{}: payload has {} bytes, tensors use {used}",
            blob_path.display(),
            blob.len()
        )));
    }
    model.store.replace_all(tensors)?;
    model.layout.coatt.ortho_lambda = manifest
        .train
        .as_ref()
        .map_or(manifest.model.ortho_lambda, |t| t.ortho_lambda);
    Ok((model, manifest))
}

/// SHA-256 over the manifest followed by the payload, hex encoded.
pub fn hash(dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for file in [MANIFEST_FILE, PARAMS_FILE] {
        let path = dir.join(file);
        hasher.update(fs::read(&path).map_err(|e| Error::io(&path, e))?);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}
