//! The editing mapper, the disentangled mapper and the stop-gradient boundary
//! between them.
//!
//! Both mappers are split into coarse, medium and fine sub-mappers acting on
//! the matching layer groups of the latent code. A sub-mapper is a stack of
//! blocks `fc -> modulation -> leaky ReLU`. Only the coarse and medium
//! sub-mappers of the editing mapper see the mask condition; everything else
//! is text-conditioned.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{merge_layers, split_layers, LatentSplit, Part, LATENT_WIDTH};
use crate::modulation::{BranchInit, Conditions, FusionWeight, Modulation};
use crate::params::{Init, Param, ParamStore};

/// What the disentangled mapper receives as its latent input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisentangledInput {
    /// The detached editing delta.
    #[default]
    Delta,
    /// The detached edited code `w_s + delta`.
    Edit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapperConfig {
    pub editing_blocks: usize,
    pub disentangled_blocks: usize,
    pub leaky_slope: f64,
    pub branch_init_std: f64,
    #[serde(default)]
    pub disentangled_input: DisentangledInput,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            editing_blocks: 5,
            disentangled_blocks: 2,
            leaky_slope: 0.2,
            branch_init_std: 0.02,
            disentangled_input: DisentangledInput::Delta,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MapperBlock {
    fc_weight: Param,
    fc_bias: Param,
    modulation: Modulation,
    leaky_slope: f64,
}

impl MapperBlock {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        with_mask: bool,
        zero_fc: bool,
        cfg: &MapperConfig,
    ) -> Result<Self> {
        let init = if zero_fc {
            Init::Zeros
        } else {
            Init::Normal {
                std: 1.0 / (LATENT_WIDTH as f64).sqrt(),
            }
        };
        Ok(Self {
            fc_weight: store.create(&format!("{prefix}.fc.weight"), (LATENT_WIDTH, LATENT_WIDTH), init)?,
            fc_bias: store.create(&format!("{prefix}.fc.bias"), (LATENT_WIDTH,), Init::Zeros)?,
            modulation: Modulation::new(
                store,
                &format!("{prefix}.mod"),
                with_mask,
                BranchInit::ScaleOnly {
                    std: cfg.branch_init_std,
                },
            )?,
            leaky_slope: cfg.leaky_slope,
        })
    }

    /// `x: (B, R, 512)`.
    pub fn forward(&self, x: &Tensor, cond: &Conditions<'_>) -> Result<Tensor> {
        let (b, r, w) = x.dims3()?;
        let h = x
            .reshape((b * r, w))?
            .matmul(&self.fc_weight.tensor())?
            .broadcast_add(&self.fc_bias.tensor())?
            .reshape((b, r, w))?;
        let h = self.modulation.forward(&h, cond)?;
        Ok(candle_nn::ops::leaky_relu(&h, self.leaky_slope)?)
    }

    pub fn has_mask_branch(&self) -> bool {
        self.modulation.has_mask_branch()
    }
}

#[derive(Clone, Debug)]
pub struct SubMapper {
    blocks: Vec<MapperBlock>,
}

impl SubMapper {
    /// The last block's fully connected layer starts at zero so an untrained
    /// sub-mapper emits a zero delta.
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        blocks: usize,
        with_mask: bool,
        cfg: &MapperConfig,
    ) -> Result<Self> {
        let blocks = (0..blocks)
            .map(|i| {
                MapperBlock::new(
                    store,
                    &format!("{prefix}.block{i}"),
                    with_mask,
                    i + 1 == blocks,
                    cfg,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    pub fn forward(&self, x: &Tensor, cond: &Conditions<'_>) -> Result<Tensor> {
        let mut h = x.clone();
        for block in &self.blocks {
            h = block.forward(&h, cond)?;
        }
        Ok(h)
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn has_mask_branch(&self) -> bool {
        self.blocks.iter().any(MapperBlock::has_mask_branch)
    }
}

fn check_inputs(w: &Tensor, e_t: &Tensor, e_m: Option<&Tensor>) -> Result<()> {
    let (b, _, width) = w.dims3()?;
    if width != LATENT_WIDTH {
        return Err(Error::ShapeMismatch(format!("latent width {width}")));
    }
    for (name, e) in [("e_t", Some(e_t)), ("e_m", e_m)] {
        if let Some(e) = e {
            if e.dims() != [b, LATENT_WIDTH] {
                return Err(Error::ShapeMismatch(format!(
                    "{name} must be ({b}, {LATENT_WIDTH}), got {:?}",
                    e.dims()
                )));
            }
        }
    }
    Ok(())
}

/// Three five-block sub-mappers; coarse and medium take both conditions,
/// fine takes text only.
#[derive(Clone, Debug)]
pub struct EditingMapper {
    coarse: SubMapper,
    medium: SubMapper,
    fine: SubMapper,
}

impl EditingMapper {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &MapperConfig) -> Result<Self> {
        let n = cfg.editing_blocks;
        Ok(Self {
            coarse: SubMapper::new(store, &format!("{prefix}.coarse"), n, true, cfg)?,
            medium: SubMapper::new(store, &format!("{prefix}.medium"), n, true, cfg)?,
            fine: SubMapper::new(store, &format!("{prefix}.fine"), n, false, cfg)?,
        })
    }

    pub fn sub_mapper(&self, part: Part) -> &SubMapper {
        match part {
            Part::Coarse => &self.coarse,
            Part::Medium => &self.medium,
            Part::Fine => &self.fine,
        }
    }

    /// Editing delta for `w_s: (B, L, 512)`, `e_t, e_m: (B, 512)`.
    pub fn forward(
        &self,
        w_s: &Tensor,
        e_t: &Tensor,
        e_m: &Tensor,
        gamma: FusionWeight,
        split: &LatentSplit,
    ) -> Result<Tensor> {
        check_inputs(w_s, e_t, Some(e_m))?;
        let (wc, wm, wf) = split_layers(w_s, split)?;
        let both = Conditions {
            mask: Some(e_m),
            text: e_t,
            gamma,
        };
        let text_only = Conditions {
            mask: None,
            text: e_t,
            gamma: FusionWeight::TEXT_ONLY,
        };
        let dc = self.coarse.forward(&wc, &both)?;
        let dm = self.medium.forward(&wm, &both)?;
        let df = self.fine.forward(&wf, &text_only)?;
        merge_layers(&dc, &dm, &df)
    }
}

/// Three two-block, text-only sub-mappers.
#[derive(Clone, Debug)]
pub struct DisentangledMapper {
    coarse: SubMapper,
    medium: SubMapper,
    fine: SubMapper,
}

impl DisentangledMapper {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &MapperConfig) -> Result<Self> {
        let n = cfg.disentangled_blocks;
        Ok(Self {
            coarse: SubMapper::new(store, &format!("{prefix}.coarse"), n, false, cfg)?,
            medium: SubMapper::new(store, &format!("{prefix}.medium"), n, false, cfg)?,
            fine: SubMapper::new(store, &format!("{prefix}.fine"), n, false, cfg)?,
        })
    }

    pub fn sub_mapper(&self, part: Part) -> &SubMapper {
        match part {
            Part::Coarse => &self.coarse,
            Part::Medium => &self.medium,
            Part::Fine => &self.fine,
        }
    }

    /// `input` must already be cut off from the editing mapper's graph
    /// (see [`decouple`]).
    pub fn forward(&self, input: &Tensor, e_t: &Tensor, split: &LatentSplit) -> Result<Tensor> {
        check_inputs(input, e_t, None)?;
        let (dc, dm, df) = split_layers(input, split)?;
        let cond = Conditions {
            mask: None,
            text: e_t,
            gamma: FusionWeight::TEXT_ONLY,
        };
        let oc = self.coarse.forward(&dc, &cond)?;
        let om = self.medium.forward(&dm, &cond)?;
        let of = self.fine.forward(&df, &cond)?;
        merge_layers(&oc, &om, &of)
    }
}

/// Same values, no gradient path back to whatever produced `delta`.
pub fn decouple(delta: &Tensor) -> Tensor {
    delta.detach()
}

/// Everything one forward pass through both mappers produces.
#[derive(Clone, Debug)]
pub struct MapperOutput {
    pub delta_edit: Tensor,
    pub delta_decoupled: Tensor,
    pub w_edit: Tensor,
    pub w_de: Tensor,
}

/// `w_edit = w_s + delta_e` and `w_de = w_edit + delta_de`, where the
/// disentangled branch only sees detached copies of the editing result.
#[allow(clippy::too_many_arguments)]
pub fn full_edit(
    editing: &EditingMapper,
    disentangled: &DisentangledMapper,
    w_s: &Tensor,
    e_t: &Tensor,
    e_m: &Tensor,
    gamma: FusionWeight,
    split: &LatentSplit,
    input: DisentangledInput,
) -> Result<MapperOutput> {
    let delta_edit = editing.forward(w_s, e_t, e_m, gamma, split)?;
    let w_edit = (w_s + &delta_edit)?;
    let d_in = match input {
        DisentangledInput::Delta => decouple(&delta_edit),
        DisentangledInput::Edit => decouple(&w_edit),
    };
    let delta_decoupled = disentangled.forward(&d_in, e_t, split)?;
    let w_de = (decouple(&w_edit) + &delta_decoupled)?;
    Ok(MapperOutput {
        delta_edit,
        delta_decoupled,
        w_edit,
        w_de,
    })
}
