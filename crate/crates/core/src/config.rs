//! Training and model configuration, read from TOML.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::PromptVocabulary;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, Stage};
use crate::mapper::MapperConfig;
use crate::mask_encoder::MaskEncoderConfig;
use crate::modulation::FusionWeight;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub seed: u64,
    pub mask_encoder: MaskEncoderConfig,
    pub mapper: MapperConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 18,
            seed: 0,
            mask_encoder: MaskEncoderConfig::default(),
            mapper: MapperConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Cosine decay from the base rate to zero over the stage.
    Cosine,
}

impl Schedule {
    pub fn rate(self, base: f64, iteration: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let t = iteration as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub gamma: FusionWeight,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Text phase: also train the fully connected trunk layers. Off by default because the
    /// zero-initialized last layer sits in front of a normalization, which turns any small
    /// update into a unit-variance jump.
    #[serde(default)]
    pub train_trunk: bool,
    /// Joint phase: also train the mask encoder.
    #[serde(default = "yes")]
    pub train_mask_encoder: bool,
}

fn default_tau() -> f64 {
    1.0
}

fn default_grad_clip() -> f64 {
    10.0
}

fn default_log_every() -> usize {
    100
}

fn yes() -> bool {
    true
}

impl StageConfig {
    pub fn paper(stage: Stage) -> Self {
        let (iterations, learning_rate, gamma) = match stage {
            Stage::MaskPhase => (145_000, 0.005, FusionWeight::MASK_ONLY),
            Stage::TextPhase => (5_000, 0.002, FusionWeight::new(0.5).expect("in range")),
            Stage::Joint => (20_000, 0.001, FusionWeight::new(0.5).expect("in range")),
        };
        Self {
            iterations,
            learning_rate,
            gamma,
            batch_size: 8,
            seed: 0,
            weights: LossWeights::paper(stage),
            tau: default_tau(),
            schedule: Schedule::Constant,
            grad_clip: default_grad_clip(),
            log_every: default_log_every(),
            train_trunk: false,
            train_mask_encoder: true,
        }
    }

    pub fn validate(&self, stage: Stage) -> Result<()> {
        self.weights.validate(stage)?;
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{stage}: batch_size must be positive")));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("{stage}: invalid learning rate {}", self.learning_rate)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidTemperature(self.tau));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config(format!("{stage}: grad_clip must be positive")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneSource {
    #[default]
    Toy,
    Published,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub source: BackboneSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub precision: Precision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Pair manifest written by `prepare-data`. Without one, toy pairs are
    /// rendered in memory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub pose_threshold_deg: f64,
    pub toy_samples: usize,
    pub held_out: usize,
    pub seed: u64,
    #[serde(default)]
    pub vocabulary: PromptVocabulary,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            pose_threshold_deg: 15.0,
            toy_samples: 600,
            held_out: 20,
            seed: 0,
            vocabulary: PromptVocabulary::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub stage1_mask: StageConfig,
    pub stage1_text: StageConfig,
    pub stage2: StageConfig,
    #[serde(default)]
    pub backbones: BackboneConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            stage1_mask: StageConfig::paper(Stage::MaskPhase),
            stage1_text: StageConfig::paper(Stage::TextPhase),
            stage2: StageConfig::paper(Stage::Joint),
            backbones: BackboneConfig {
                source: BackboneSource::Published,
                manifest: Some(PathBuf::from("weights/manifest.json")),
                precision: Precision::F32,
            },
            data: DataConfig::default(),
        }
    }
}

impl Config {
    /// Desk-scale setup on the toy backbones.
    pub fn toy() -> Self {
        let mut cfg = Self::default();
        cfg.model.layers = crate::backbones::toy::LAYERS;
        cfg.model.mask_encoder.resolution = crate::backbones::toy::RESOLUTION;
        cfg.model.mask_encoder.channels = [8, 16, 32, 64, 128];
        cfg.backbones = BackboneConfig::default();
        for (stage, iterations) in [(Stage::MaskPhase, 2000), (Stage::TextPhase, 500), (Stage::Joint, 200)] {
            let s = cfg.stage_mut(stage);
            s.iterations = iterations;
            s.batch_size = 16;
            s.log_every = 50;
        }
        cfg
    }

    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::MaskPhase => &self.stage1_mask,
            Stage::TextPhase => &self.stage1_text,
            Stage::Joint => &self.stage2,
        }
    }

    pub fn stage_mut(&mut self, stage: Stage) -> &mut StageConfig {
        match stage {
            Stage::MaskPhase => &mut self.stage1_mask,
            Stage::TextPhase => &mut self.stage1_text,
            Stage::Joint => &mut self.stage2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        crate::latent::LatentSplit::standard(self.model.layers)?;
        for stage in Stage::ALL {
            self.stage(stage).validate(stage)?;
        }
        if self.backbones.source == BackboneSource::Published && self.backbones.manifest.is_none() {
            return Err(Error::Config("published backbones need a weights manifest".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config; relative paths inside it resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_toml_str(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.backbones.manifest, &mut cfg.data.manifest].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hash of the whole configuration.
    pub fn hash(&self) -> String {
        hash_json(self)
    }

    /// Hash of the architecture only; checkpoints from earlier stages must
    /// agree on it.
    pub fn model_hash(&self) -> String {
        hash_json(&self.model)
    }
}

fn hash_json<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(json))
}
