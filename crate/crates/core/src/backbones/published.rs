//! Loading published weights listed in a manifest.
//!
//! The loader locates each weights file, verifies its SHA-256 and exposes the
//! declared metadata. Running the published architectures is not supported by
//! this crate, so every forward method reports [`Error::BackboneUnavailable`];
//! callers that need real outputs must skip.

use std::fmt;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{FaceParser, FaceRecognizer, Generator, GlassesClassifier, ImageEncoder, Inverter, TextEncoder};
use crate::error::{Error, Result};
use crate::segmentation::LabelMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Generator,
    Inverter,
    TextEncoder,
    ImageEncoder,
    FaceParser,
    GlassesClassifier,
    FaceRecognizer,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 7] = [
        BackboneKind::Generator,
        BackboneKind::Inverter,
        BackboneKind::TextEncoder,
        BackboneKind::ImageEncoder,
        BackboneKind::FaceParser,
        BackboneKind::GlassesClassifier,
        BackboneKind::FaceRecognizer,
    ];
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        write!(f, "{}", s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsEntry {
    pub kind: BackboneKind,
    pub path: PathBuf,
    pub sha256: String,
    #[serde(default)]
    pub resolution: Option<usize>,
    #[serde(default, rename = "L")]
    pub layers: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub entries: Vec<WeightsEntry>,
}

impl WeightsManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::BackboneUnavailable(format!("weights manifest {}: {e}", path.display()))
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn entry(&self, kind: BackboneKind) -> Option<&WeightsEntry> {
        self.entries.iter().find(|e| e.kind == kind)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut file = std::fs::File::open(path)?;
    std::io::copy(&mut file, &mut hasher)?;
    Ok(hex::encode(hasher.finalize()))
}

/// A verified weights file. Paths in the manifest are relative to the
/// manifest's directory.
#[derive(Clone, Debug)]
pub struct PublishedBackbone {
    entry: WeightsEntry,
    path: PathBuf,
    labels: LabelMap,
}

pub fn load_published(kind: BackboneKind, manifest_path: impl AsRef<Path>) -> Result<PublishedBackbone> {
    let manifest_path = manifest_path.as_ref();
    let manifest = WeightsManifest::load(manifest_path)?;
    let entry = manifest
        .entry(kind)
        .ok_or_else(|| Error::BackboneUnavailable(format!("no {kind} entry in {}", manifest_path.display())))?
        .clone();
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let path = base.join(&entry.path);
    if !path.is_file() {
        return Err(Error::BackboneUnavailable(format!(
            "{kind} weights not found at {}",
            path.display()
        )));
    }
    let actual = sha256_file(&path)?;
    if !actual.eq_ignore_ascii_case(&entry.sha256) {
        return Err(Error::CorruptWeights {
            kind: kind.to_string(),
            reason: format!("sha256 {actual} does not match manifest {}", entry.sha256),
        });
    }
    Ok(PublishedBackbone {
        entry,
        path,
        labels: LabelMap::celebamask_hq(),
    })
}

impl PublishedBackbone {
    pub fn kind(&self) -> BackboneKind {
        self.entry.kind
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn entry(&self) -> &WeightsEntry {
        &self.entry
    }

    fn unavailable<T>(&self) -> Result<T> {
        Err(Error::BackboneUnavailable(format!(
            "{} architecture is not bundled; weights at {} were verified but cannot be run",
            self.entry.kind,
            self.path.display()
        )))
    }
}

impl Generator for PublishedBackbone {
    fn layers(&self) -> usize {
        self.entry.layers.unwrap_or(18)
    }

    fn resolution(&self) -> usize {
        self.entry.resolution.unwrap_or(1024)
    }

    fn synthesize(&self, _w: &Tensor) -> Result<Tensor> {
        self.unavailable()
    }
}

impl Inverter for PublishedBackbone {
    fn invert(&self, _images: &Tensor) -> Result<Tensor> {
        self.unavailable()
    }
}

impl TextEncoder for PublishedBackbone {
    fn encode(&self, _prompts: &[&str]) -> Result<Tensor> {
        self.unavailable()
    }
}

impl ImageEncoder for PublishedBackbone {
    fn encode(&self, _images: &Tensor) -> Result<Tensor> {
        self.unavailable()
    }
}

impl FaceParser for PublishedBackbone {
    fn label_map(&self) -> &LabelMap {
        &self.labels
    }

    fn parse_probs(&self, _images: &Tensor) -> Result<Tensor> {
        self.unavailable()
    }
}

impl GlassesClassifier for PublishedBackbone {
    fn score(&self, _images: &Tensor) -> Result<Tensor> {
        self.unavailable()
    }
}

impl FaceRecognizer for PublishedBackbone {
    fn embedding_dim(&self) -> usize {
        512
    }

    fn embed(&self, _images: &Tensor) -> Result<Tensor> {
        self.unavailable()
    }
}
