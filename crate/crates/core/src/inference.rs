//! Single-image editing: invert, encode conditions, run both mappers and
//! synthesize the edit and decoupled results.

use std::path::Path;
use std::time::Instant;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use crate::backbones::{Backbones, FaceParser};
use crate::checkpoint::{load_checkpoint, manifest_hash, read_config};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::mask::MaskImage;
use crate::model::GlassModel;
use crate::modulation::FusionWeight;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditOptions {
    pub return_edit: bool,
    pub return_decoupled: bool,
    pub gamma_override: Option<f64>,
}

impl Default for EditOptions {
    fn default() -> Self {
        Self {
            return_edit: true,
            return_decoupled: true,
            gamma_override: None,
        }
    }
}

/// Images are base64 PNG, optionally as a `data:` URL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub image: String,
    pub mask: String,
    pub prompt: String,
    #[serde(default)]
    pub options: EditOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditResponse {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edit_image: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoupled_image: Option<String>,
    pub timing_ms: f64,
    pub model_manifest: String,
}

#[derive(Clone, Debug)]
pub struct EditOutput {
    pub reconstruction: ImageRgb,
    pub edit: ImageRgb,
    pub decoupled: ImageRgb,
    pub w_s: Tensor,
    pub w_edit: Tensor,
    pub w_de: Tensor,
}

pub fn decode_base64(payload: &str) -> Result<Vec<u8>> {
    let body = match payload.split_once(";base64,") {
        Some((head, rest)) if head.starts_with("data:") => rest,
        _ => payload,
    };
    STANDARD
        .decode(body.trim())
        .map_err(|e| Error::Decode(format!("invalid base64: {e}")))
}

pub fn encode_base64(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

/// Loaded model and backbones. Immutable once built, so it can be shared
/// across request handlers.
pub struct Editor {
    pub model: GlassModel,
    pub backbones: Backbones,
    pub config: Config,
    pub gamma: FusionWeight,
    pub manifest_hash: String,
}

impl std::fmt::Debug for Editor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Editor")
            .field("layers", &self.model.config.layers)
            .field("gamma", &self.gamma)
            .field("manifest_hash", &self.manifest_hash)
            .finish_non_exhaustive()
    }
}

impl Editor {
    pub fn new(model: GlassModel, backbones: Backbones, config: Config, gamma: FusionWeight, manifest_hash: String) -> Self {
        Self {
            model,
            backbones,
            config,
            gamma,
            manifest_hash,
        }
    }

    /// Loads a checkpoint directory together with the config it was trained
    /// under. The default gamma is the checkpoint's.
    pub fn load(dir: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let dir = dir.as_ref();
        let config = read_config(dir)?;
        let backbones = Backbones::from_config(&config.backbones, device)?;
        let model = GlassModel::new(&config.model, config.backbones.precision.dtype(), device)?;
        let manifest = load_checkpoint(dir, &model)?;
        let gamma = FusionWeight::new(manifest.gamma)?;
        Ok(Self::new(model, backbones, config, gamma, manifest_hash(dir)?))
    }

    pub fn layers(&self) -> usize {
        self.model.config.layers
    }

    pub fn dtype(&self) -> DType {
        self.model.dtype()
    }

    pub fn device(&self) -> &Device {
        self.model.device()
    }

    pub fn resolution(&self) -> usize {
        self.backbones.generator.resolution()
    }

    pub fn mask_resolution(&self) -> usize {
        self.model.config.mask_encoder.resolution
    }

    /// Resizes to the generator's resolution when needed.
    pub fn conform_image(&self, image: &ImageRgb) -> Result<ImageRgb> {
        let r = self.resolution();
        if image.width() == r && image.height() == r {
            return Ok(image.clone());
        }
        let resized = image::imageops::resize(&image.to_rgb8()?, r as u32, r as u32, FilterType::Triangle);
        ImageRgb::from_rgb8(&resized, self.dtype(), self.device())
    }

    pub fn edit(&self, image: &ImageRgb, mask: &MaskImage, prompt: &str, gamma: Option<FusionWeight>) -> Result<EditOutput> {
        if prompt.trim().is_empty() {
            return Err(Error::InvalidRequest("prompt is empty".into()));
        }
        let image = self.conform_image(image)?;
        let mask = mask.conform(self.mask_resolution(), self.model.config.mask_encoder.resize_policy)?;
        let g = &self.backbones.generator;
        let batch = image.tensor().to_dtype(self.dtype())?.unsqueeze(0)?;
        let w_s = self.backbones.inverter.invert(&batch)?.detach();
        let e_t = self.backbones.text_encoder.encode(&[prompt])?;
        let e_m = self.model.encode_masks(&[&mask])?;
        let out = self.model.forward(&w_s, &e_t, &e_m, gamma.unwrap_or(self.gamma))?;
        let first = |t: Tensor| -> Result<ImageRgb> { ImageRgb::new(t.get(0)?) };
        Ok(EditOutput {
            reconstruction: first(g.synthesize(&w_s)?)?,
            edit: first(g.synthesize(&out.w_edit.detach())?)?,
            decoupled: first(g.synthesize(&out.w_de.detach())?)?,
            w_s,
            w_edit: out.w_edit.detach(),
            w_de: out.w_de.detach(),
        })
    }

    pub fn handle(&self, req: &EditRequest) -> Result<EditResponse> {
        let start = Instant::now();
        let opts = &req.options;
        if !opts.return_edit && !opts.return_decoupled {
            return Err(Error::InvalidRequest("request asks for no output image".into()));
        }
        let gamma = opts.gamma_override.map(FusionWeight::new).transpose()?;
        let image = ImageRgb::from_png_bytes(&decode_base64(&req.image)?, self.dtype(), self.device())
            .map_err(|e| Error::Decode(format!("image: {e}")))?;
        let mask = MaskImage::from_png_bytes(&decode_base64(&req.mask)?).map_err(|e| match e {
            Error::NonBinaryMask(_) => e,
            other => Error::Decode(format!("mask: {other}")),
        })?;
        let out = self.edit(&image, &mask, &req.prompt, gamma)?;
        let png = |img: &ImageRgb| -> Result<String> { Ok(encode_base64(&img.to_png_bytes()?)) };
        Ok(EditResponse {
            edit_image: opts.return_edit.then(|| png(&out.edit)).transpose()?,
            decoupled_image: opts.return_decoupled.then(|| png(&out.decoupled)).transpose()?,
            timing_ms: start.elapsed().as_secs_f64() * 1e3,
            model_manifest: self.manifest_hash.clone(),
        })
    }
}

/// Pixels the parser labels as eyeglasses.
pub fn glyph_mask(parser: &dyn FaceParser, image: &ImageRgb) -> Result<MaskImage> {
    let labels = parser.parse_labels(&image.tensor().unsqueeze(0)?)?;
    Ok(labels[0].region(parser.label_map().glasses))
}

/// Mean RGB over the set pixels of `region`; `None` when it is empty.
pub fn mean_color(image: &ImageRgb, region: &MaskImage) -> Result<Option<[f64; 3]>> {
    if region.width() != image.width() || region.height() != image.height() {
        return Err(Error::ShapeMismatch("region and image differ in size".into()));
    }
    let n = region.count();
    if n == 0 {
        return Ok(None);
    }
    let v = image.tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let plane = region.pixels().len();
    let mut sum = [0.0; 3];
    for (i, &m) in region.pixels().iter().enumerate() {
        if m == 1 {
            for (c, s) in sum.iter_mut().enumerate() {
                *s += v[c * plane + i];
            }
        }
    }
    Ok(Some(sum.map(|s| s / n as f64)))
}
