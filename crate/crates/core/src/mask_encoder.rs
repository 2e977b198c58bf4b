//! Convolutional encoder turning a binary eyeglasses mask into a 512-d
//! condition embedding.
//!
//! Five blocks of `conv3x3/stride 2 -> instance norm -> ReLU`, then global
//! average pooling and an affine projection. Instance norm always uses the
//! statistics of the current sample.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{MaskImage, ResizePolicy};
use crate::params::{Init, Param, ParamStore};

pub const EMBEDDING_WIDTH: usize = 512;
pub const NUM_BLOCKS: usize = 5;
const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskEncoderConfig {
    pub resolution: usize,
    pub channels: [usize; NUM_BLOCKS],
    #[serde(default)]
    pub resize_policy: ResizePolicy,
}

impl Default for MaskEncoderConfig {
    fn default() -> Self {
        Self {
            resolution: 256,
            channels: [16, 32, 64, 128, 256],
            resize_policy: ResizePolicy::Resize,
        }
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    weight: Param,
    bias: Param,
    norm_scale: Param,
    norm_shift: Param,
}

impl ConvBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight.tensor(), 1, 2, 1, 1)?;
        let c = y.dim(1)?;
        let y = y.broadcast_add(&self.bias.tensor().reshape((1, c, 1, 1))?)?;
        let y = instance_norm(&y)?;
        let y = y
            .broadcast_mul(&self.norm_scale.tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.norm_shift.tensor().reshape((1, c, 1, 1))?)?;
        Ok(y.relu()?)
    }
}

/// Per-sample, per-channel normalization over the spatial axes.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + INSTANCE_NORM_EPS)?.sqrt()?)?;
    Ok(normed.reshape((b, c, h, w))?)
}

#[derive(Clone, Debug)]
pub struct MaskEncoder {
    config: MaskEncoderConfig,
    blocks: Vec<ConvBlock>,
    proj_weight: Param,
    proj_bias: Param,
}

impl MaskEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, config: MaskEncoderConfig) -> Result<Self> {
        if config.resolution < (1 << NUM_BLOCKS) {
            return Err(Error::Config(format!(
                "mask resolution {} is too small for {NUM_BLOCKS} stride-2 blocks",
                config.resolution
            )));
        }
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        let mut cin = 1;
        for (i, &cout) in config.channels.iter().enumerate() {
            let p = format!("{prefix}.block{i}");
            let std = (2.0 / (cin * 9) as f64).sqrt();
            blocks.push(ConvBlock {
                weight: store.create(&format!("{p}.conv.weight"), (cout, cin, 3, 3), Init::Normal { std })?,
                bias: store.create(&format!("{p}.conv.bias"), (cout,), Init::Zeros)?,
                norm_scale: store.create(&format!("{p}.norm.weight"), (cout,), Init::Const(1.0))?,
                norm_shift: store.create(&format!("{p}.norm.bias"), (cout,), Init::Zeros)?,
            });
            cin = cout;
        }
        let std = 1.0 / (cin as f64).sqrt();
        let proj_weight = store.create(
            &format!("{prefix}.proj.weight"),
            (cin, EMBEDDING_WIDTH),
            Init::Normal { std },
        )?;
        let proj_bias = store.create(&format!("{prefix}.proj.bias"), (EMBEDDING_WIDTH,), Init::Zeros)?;
        Ok(Self {
            config,
            blocks,
            proj_weight,
            proj_bias,
        })
    }

    pub fn config(&self) -> &MaskEncoderConfig {
        &self.config
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// `(B, 1, R, R)` masks of 0/1 to `(B, 512)` embeddings.
    pub fn forward(&self, masks: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = masks.dims4()?;
        let r = self.config.resolution;
        if c != 1 || h != r || w != r {
            return Err(Error::ShapeMismatch(format!(
                "mask batch must be (B, 1, {r}, {r}), got {:?}",
                masks.dims()
            )));
        }
        let mut x = masks.to_dtype(self.proj_weight.var().dtype())?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let pooled = x.mean(D::Minus1)?.mean(D::Minus1)?;
        Ok(pooled
            .matmul(&self.proj_weight.tensor())?
            .broadcast_add(&self.proj_bias.tensor())?)
    }

    /// Prepares masks (binarity is guaranteed by [`MaskImage`]) and encodes them.
    pub fn encode_masks(&self, masks: &[&MaskImage]) -> Result<Tensor> {
        if masks.is_empty() {
            return Err(Error::EmptyInput("mask batch"));
        }
        let conformed = masks
            .iter()
            .map(|m| m.conform(self.config.resolution, self.config.resize_policy))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&MaskImage> = conformed.iter().collect();
        let dtype = self.proj_weight.var().dtype();
        let device = self.proj_weight.var().device().clone();
        self.forward(&MaskImage::batch_tensor(&refs, dtype, &device)?)
    }

    pub fn encode_mask(&self, mask: &MaskImage) -> Result<Tensor> {
        Ok(self.encode_masks(&[mask])?.squeeze(0)?)
    }
}
