//! Checkpoints: a directory holding `manifest.toml` and one binary file
//! per parameter under `params/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{HsvitModel, ModelConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
    sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    /// Hash over every parameter's name and bytes, in parameter order.
    model_sha256: String,
    /// Optimizer steps taken before this checkpoint.
    steps: u64,
    model: ModelConfig,
    params: Vec<ParamEntry>,
}

/// SHA-256 over the model's parameter names and serialized values.
pub fn model_hash(model: &HsvitModel) -> String {
    let mut h = Sha256::new();
    for (name, t) in model.named_params() {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update(t.to_bytes());
    }
    hex::encode(h.finalize())
}

/// Writes `model` to `dir`, replacing any previous checkpoint there.
/// Returns the model hash.
pub fn save(model: &HsvitModel, steps: u64, dir: &Path) -> Result<String> {
    let params_dir = dir.join("params");
    if params_dir.exists() {
        fs::remove_dir_all(&params_dir)?;
    }
    fs::create_dir_all(&params_dir)?;
    let mut params = Vec::new();
    for (name, t) in model.named_params() {
        let bytes = t.to_bytes();
        let file = format!("params/{name}.bin");
        fs::write(dir.join(&file), &bytes)?;
        params.push(ParamEntry {
            name,
            file,
            shape: t.shape().to_vec(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let manifest = Manifest {
        model_sha256: model_hash(model),
        steps,
        model: model.config().clone(),
        params,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join("manifest.toml"), text)?;
    Ok(manifest.model_sha256)
}

/// Loads a checkpoint, verifying every file hash and the model hash.
/// Returns the model and the recorded step count.
pub fn load(dir: &Path) -> Result<(HsvitModel, u64)> {
    let manifest_path = dir.join("manifest.toml");
    let text = fs::read_to_string(&manifest_path)?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Format {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    let mut model = HsvitModel::new(manifest.model.clone(), 0)?;
    let mut stored: BTreeMap<&str, &ParamEntry> = manifest.params.iter().map(|p| (p.name.as_str(), p)).collect();
    for (name, target) in model.named_params_mut() {
        let entry = stored
            .remove(name.as_str())
            .ok_or_else(|| Error::Consistency(format!("checkpoint lacks parameter {name}")))?;
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path)?;
        if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
            return Err(Error::Consistency(format!(
                "{} does not match its recorded hash",
                path.display()
            )));
        }
        let t = Tensor::from_bytes(&bytes)?;
        if t.shape() != target.shape() || t.shape() != entry.shape {
            return Err(Error::Consistency(format!(
                "parameter {name}: stored shape {:?}, model expects {:?}",
                t.shape(),
                target.shape()
            )));
        }
        target.data_mut().copy_from_slice(t.data());
    }
    if let Some(extra) = stored.keys().next() {
        return Err(Error::Consistency(format!("checkpoint has unknown parameter {extra}")));
    }
    if model_hash(&model) != manifest.model_sha256 {
        return Err(Error::Consistency("model hash does not match the manifest".into()));
    }
    Ok((model, manifest.steps))
}
