//! The trainable part of the editor: mask encoder plus both mappers.

use candle_core::{DType, Device, Tensor};

use crate::config::ModelConfig;
use crate::error::Result;
use crate::latent::LatentSplit;
use crate::mapper::{full_edit, DisentangledMapper, EditingMapper, MapperOutput};
use crate::mask::MaskImage;
use crate::mask_encoder::MaskEncoder;
use crate::modulation::FusionWeight;
use crate::params::ParamStore;

pub const MASK_ENCODER: &str = "mask_encoder";
pub const EDITING: &str = "editing";
pub const DISENTANGLED: &str = "disentangled";

#[derive(Debug)]
pub struct GlassModel {
    pub store: ParamStore,
    pub mask_encoder: MaskEncoder,
    pub editing: EditingMapper,
    pub disentangled: DisentangledMapper,
    pub split: LatentSplit,
    pub config: ModelConfig,
}

impl GlassModel {
    pub fn new(config: &ModelConfig, dtype: DType, device: &Device) -> Result<Self> {
        let split = LatentSplit::standard(config.layers)?;
        let mut store = ParamStore::new(config.seed, dtype, device.clone());
        let mask_encoder = MaskEncoder::new(&mut store, MASK_ENCODER, config.mask_encoder.clone())?;
        let editing = EditingMapper::new(&mut store, EDITING, &config.mapper)?;
        let disentangled = DisentangledMapper::new(&mut store, DISENTANGLED, &config.mapper)?;
        Ok(Self {
            store,
            mask_encoder,
            editing,
            disentangled,
            split,
            config: config.clone(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn encode_masks(&self, masks: &[&MaskImage]) -> Result<Tensor> {
        self.mask_encoder.encode_masks(masks)
    }

    /// Editing delta only.
    pub fn edit_delta(&self, w_s: &Tensor, e_t: &Tensor, e_m: &Tensor, gamma: FusionWeight) -> Result<Tensor> {
        self.editing.forward(w_s, e_t, e_m, gamma, &self.split)
    }

    /// Both mappers.
    pub fn forward(&self, w_s: &Tensor, e_t: &Tensor, e_m: &Tensor, gamma: FusionWeight) -> Result<MapperOutput> {
        full_edit(
            &self.editing,
            &self.disentangled,
            w_s,
            e_t,
            e_m,
            gamma,
            &self.split,
            self.config.mapper.disentangled_input,
        )
    }
}
