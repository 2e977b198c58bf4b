//! Checkpoint directories: `model.safetensors`, `manifest.json` and the
//! `config.toml` the run used.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, Stage};
use crate::model::GlassModel;

pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub stage_id: Stage,
    pub iteration: usize,
    pub gamma: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub config_hash: String,
    pub model_hash: String,
    pub layers: usize,
    /// SHA-256 of the weights file.
    pub params_sha256: String,
    /// Whether the stage ran to its full budget.
    pub complete: bool,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub dir: PathBuf,
    pub manifest: CheckpointManifest,
}

fn corrupt(path: &Path, reason: impl ToString) -> Error {
    Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    model: &GlassModel,
    config: &Config,
    stage: Stage,
    iteration: usize,
    complete: bool,
) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let weights_path = dir.join(WEIGHTS_FILE);
    model.store.save(&weights_path)?;
    let sc = config.stage(stage);
    let manifest = CheckpointManifest {
        stage_id: stage,
        iteration,
        gamma: sc.gamma.value(),
        weights: sc.weights.clone(),
        seed: sc.seed,
        config_hash: config.hash(),
        model_hash: config.model_hash(),
        layers: model.config.layers,
        params_sha256: hex::encode(Sha256::digest(std::fs::read(&weights_path)?)),
        complete,
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    std::fs::write(dir.join(CONFIG_FILE), config.to_toml_string()?)?;
    Ok(Checkpoint {
        dir: dir.to_path_buf(),
        manifest,
    })
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| corrupt(&path, e))?;
    serde_json::from_str(&text).map_err(|e| corrupt(&path, e))
}

pub fn read_config(dir: impl AsRef<Path>) -> Result<Config> {
    let path = dir.as_ref().join(CONFIG_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| corrupt(&path, e))?;
    Config::from_toml_str(&text)
}

/// SHA-256 of the manifest file, identifying a checkpoint.
pub fn manifest_hash(dir: impl AsRef<Path>) -> Result<String> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| corrupt(&path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Verifies the weights file against the manifest and loads every tensor
/// into `model`.
pub fn load_checkpoint(dir: impl AsRef<Path>, model: &GlassModel) -> Result<CheckpointManifest> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let weights_path = dir.join(WEIGHTS_FILE);
    let bytes = std::fs::read(&weights_path).map_err(|e| corrupt(&weights_path, e))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    if digest != manifest.params_sha256 {
        return Err(corrupt(&weights_path, "weights do not match the manifest checksum"));
    }
    if manifest.layers != model.config.layers {
        return Err(corrupt(
            &weights_path,
            format!("checkpoint has {} layers, model has {}", manifest.layers, model.config.layers),
        ));
    }
    let tensors: HashMap<String, _> = candle_core::safetensors::load_buffer(&bytes, model.device())
        .map_err(|e| corrupt(&weights_path, e))?;
    model.store.load_values(&tensors)?;
    Ok(manifest)
}

/// Checks that `manifest` may seed a run of `stage` under `config`: either it
/// is a finished prerequisite, or it is the same stage being resumed.
pub fn check_compatible(manifest: &CheckpointManifest, config: &Config, stage: Stage, force: bool) -> Result<()> {
    if manifest.model_hash != config.model_hash() && !force {
        return Err(Error::ConfigHashMismatch {
            expected: config.model_hash(),
            found: manifest.model_hash.clone(),
        });
    }
    if manifest.stage_id == stage {
        if manifest.config_hash != config.hash() && !force {
            return Err(Error::ConfigHashMismatch {
                expected: config.hash(),
                found: manifest.config_hash.clone(),
            });
        }
        return Ok(());
    }
    match stage.prerequisite() {
        Some(req) if req == manifest.stage_id && manifest.complete => Ok(()),
        Some(req) if req == manifest.stage_id => Err(Error::StageOrder {
            stage: stage.to_string(),
            required: format!("{req} (the given one stopped at iteration {})", manifest.iteration),
        }),
        _ => Err(Error::ResumeStageMismatch {
            expected: stage.prerequisite().unwrap_or(stage).to_string(),
            found: manifest.stage_id.to_string(),
        }),
    }
}

/// Parameter name to SHA-256 of its bytes.
pub fn param_digests(model: &GlassModel) -> Result<BTreeMap<String, String>> {
    model
        .store
        .names()
        .map(|n| Ok((n.to_string(), hex::encode(Sha256::digest(model.store.bytes_of(n)?)))))
        .collect()
}
