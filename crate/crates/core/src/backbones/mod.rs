//! Contracts for the pretrained networks the editor is built around.
//!
//! All image tensors are `(B, 3, H, W)` in [0, 1]. Every method is
//! differentiable in its tensor input unless stated otherwise.

use std::sync::Arc;

use candle_core::{DType, Device, Tensor};

use crate::config::{BackboneConfig, BackboneSource};
use crate::error::{Error, Result};
use crate::segmentation::{LabelMap, SegmentationLabel};

pub mod published;
pub mod toy;

pub trait Generator: Send + Sync {
    fn layers(&self) -> usize;
    fn resolution(&self) -> usize;
    /// `(B, L, 512)` to `(B, 3, H, W)`.
    fn synthesize(&self, w: &Tensor) -> Result<Tensor>;
}

pub trait Inverter: Send + Sync {
    /// Returns `(B, L, 512)` codes. Not differentiable.
    fn invert(&self, images: &Tensor) -> Result<Tensor>;
}

pub trait TextEncoder: Send + Sync {
    /// One unit-norm row per prompt, `(N, 512)`.
    fn encode(&self, prompts: &[&str]) -> Result<Tensor>;
}

pub trait ImageEncoder: Send + Sync {
    /// One unit-norm row per image, `(B, 512)`.
    fn encode(&self, images: &Tensor) -> Result<Tensor>;
}

pub trait FaceParser: Send + Sync {
    fn label_map(&self) -> &LabelMap;

    /// `(B, C, H, W)` class probabilities summing to one per pixel.
    fn parse_probs(&self, images: &Tensor) -> Result<Tensor>;

    fn parse_labels(&self, images: &Tensor) -> Result<Vec<SegmentationLabel>> {
        let probs = self.parse_probs(&images.detach())?;
        (0..probs.dim(0)?)
            .map(|i| SegmentationLabel::from_probs(&probs.get(i)?))
            .collect()
    }
}

pub trait GlassesClassifier: Send + Sync {
    /// `(B,)` scores; lower means more eyeglasses.
    fn score(&self, images: &Tensor) -> Result<Tensor>;
}

pub trait FaceRecognizer: Send + Sync {
    fn embedding_dim(&self) -> usize;
    /// `(B, D)` identity embeddings.
    fn embed(&self, images: &Tensor) -> Result<Tensor>;
}

/// The full set of networks one pipeline needs.
#[derive(Clone)]
pub struct Backbones {
    pub generator: Arc<dyn Generator>,
    pub inverter: Arc<dyn Inverter>,
    pub text_encoder: Arc<dyn TextEncoder>,
    pub image_encoder: Arc<dyn ImageEncoder>,
    pub parser: Arc<dyn FaceParser>,
    pub classifier: Arc<dyn GlassesClassifier>,
    pub recognizer: Arc<dyn FaceRecognizer>,
}

impl Backbones {
    pub fn toy(dtype: DType, device: &Device) -> Result<Self> {
        toy::backbones(dtype, device)
    }

    /// Builds the configured set. Published weights are located and verified
    /// first; since their architectures cannot run here the result is then
    /// `BackboneUnavailable`.
    pub fn from_config(config: &BackboneConfig, device: &Device) -> Result<Self> {
        match config.source {
            BackboneSource::Toy => Self::toy(config.precision.dtype(), device),
            BackboneSource::Published => {
                let manifest = config
                    .manifest
                    .as_ref()
                    .ok_or_else(|| Error::BackboneUnavailable("no weights manifest configured".into()))?;
                for kind in published::BackboneKind::ALL {
                    published::load_published(kind, manifest)?;
                }
                Err(Error::BackboneUnavailable(
                    "published weights verified, but their architectures are not bundled".into(),
                ))
            }
        }
    }
}

impl std::fmt::Debug for Backbones {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backbones")
            .field("layers", &self.generator.layers())
            .field("resolution", &self.generator.resolution())
            .finish_non_exhaustive()
    }
}
