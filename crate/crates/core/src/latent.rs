//! Codes and deltas in the generator's extended (W+) style space.
//!
//! A code is a stack of `L` per-layer style vectors of width [`LATENT_WIDTH`].
//! Editing happens on three contiguous layer groups: coarse, medium and fine.
//! Tensors may carry a leading batch dimension, `(B, L, 512)`; every operation
//! here works on the last two dimensions.

use std::ops::Range;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LATENT_WIDTH: usize = 512;

/// Only the extended style space is supported.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpaceTag {
    #[default]
    #[serde(rename = "W+")]
    WPlus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Part {
    Coarse,
    Medium,
    Fine,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Coarse, Part::Medium, Part::Fine];

    pub fn name(self) -> &'static str {
        match self {
            Part::Coarse => "coarse",
            Part::Medium => "medium",
            Part::Fine => "fine",
        }
    }
}

/// Contiguous coarse / medium / fine layer ranges covering `[0, L)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentSplit {
    pub coarse: Range<usize>,
    pub medium: Range<usize>,
    pub fine: Range<usize>,
}

impl LatentSplit {
    pub fn new(coarse: Range<usize>, medium: Range<usize>, fine: Range<usize>) -> Result<Self> {
        let split = Self {
            coarse,
            medium,
            fine,
        };
        split.validate(split.fine.end)?;
        Ok(split)
    }

    /// Default partition for `layers` layers.
    ///
    /// Full-scale generators (12 layers or more) use coarse = 0..4, medium = 4..8
    /// and the rest as fine. Smaller generators are cut into thirds with the
    /// remainder going to the fine group.
    pub fn standard(layers: usize) -> Result<Self> {
        if layers < 3 {
            return Err(Error::InvalidSplit(format!(
                "need at least 3 layers, got {layers}"
            )));
        }
        if layers >= 12 {
            return Self::new(0..4, 4..8, 8..layers);
        }
        let third = layers / 3;
        Self::new(0..third, third..2 * third, 2 * third..layers)
    }

    pub fn layers(&self) -> usize {
        self.fine.end
    }

    pub fn range(&self, part: Part) -> Range<usize> {
        match part {
            Part::Coarse => self.coarse.clone(),
            Part::Medium => self.medium.clone(),
            Part::Fine => self.fine.clone(),
        }
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        let ranges = [&self.coarse, &self.medium, &self.fine];
        if ranges.iter().any(|r| r.is_empty()) {
            return Err(Error::InvalidSplit(format!("empty range in {self:?}")));
        }
        if self.coarse.start != 0
            || self.coarse.end != self.medium.start
            || self.medium.end != self.fine.start
        {
            return Err(Error::InvalidSplit(format!(
                "ranges must be ordered and contiguous from 0: {self:?}"
            )));
        }
        if self.fine.end != layers {
            return Err(Error::InvalidSplit(format!(
                "split covers {} layers but the code has {layers}",
                self.fine.end
            )));
        }
        Ok(())
    }
}

fn check_latent_shape(t: &Tensor, what: &'static str) -> Result<usize> {
    let dims = t.dims();
    if !(2..=3).contains(&dims.len()) || dims[dims.len() - 1] != LATENT_WIDTH {
        return Err(Error::ShapeMismatch(format!(
            "{what} must be (L, {LATENT_WIDTH}) or (B, L, {LATENT_WIDTH}), got {dims:?}"
        )));
    }
    Ok(dims[dims.len() - 2])
}

fn check_finite(t: &Tensor, what: &'static str) -> Result<()> {
    let values = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// A point in W+ (optionally batched).
#[derive(Clone, Debug)]
pub struct LatentCode {
    tensor: Tensor,
}

impl LatentCode {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let layers = check_latent_shape(&tensor, "latent code")?;
        if layers < 3 {
            return Err(Error::ShapeMismatch(format!(
                "latent code needs at least 3 layers, got {layers}"
            )));
        }
        check_finite(&tensor, "latent code")?;
        Ok(Self { tensor })
    }

    /// Wraps a tensor produced inside a differentiable computation. Shape is
    /// checked; finiteness is not, so the autodiff graph is left untouched.
    pub fn from_graph(tensor: Tensor) -> Result<Self> {
        let layers = check_latent_shape(&tensor, "latent code")?;
        if layers < 3 {
            return Err(Error::ShapeMismatch(format!(
                "latent code needs at least 3 layers, got {layers}"
            )));
        }
        Ok(Self { tensor })
    }

    pub fn zeros(layers: usize, dtype: DType, device: &Device) -> Result<Self> {
        Self::new(Tensor::zeros((layers, LATENT_WIDTH), dtype, device)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn layers(&self) -> usize {
        self.tensor.dims()[self.tensor.rank() - 2]
    }

    pub fn is_batched(&self) -> bool {
        self.tensor.rank() == 3
    }

    pub fn space_tag(&self) -> SpaceTag {
        SpaceTag::WPlus
    }

    /// Writes the code as a safetensors blob at `path` and its manifest at
    /// `path` with a `.json` extension appended.
    pub fn save(&self, path: impl AsRef<Path>, split: &LatentSplit) -> Result<()> {
        let path = path.as_ref();
        split.validate(self.layers())?;
        self.tensor.save_safetensors("latent", path)?;
        let manifest = LatentManifest {
            layers: self.layers(),
            split: split.clone(),
            space_tag: SpaceTag::WPlus,
        };
        std::fs::write(
            manifest_path(path),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<(Self, LatentManifest)> {
        let path = path.as_ref();
        let manifest: LatentManifest =
            serde_json::from_str(&std::fs::read_to_string(manifest_path(path))?)?;
        let mut tensors = candle_core::safetensors::load(path, device)?;
        let tensor = tensors
            .remove("latent")
            .ok_or_else(|| Error::Decode(format!("{} has no `latent` tensor", path.display())))?;
        let code = Self::new(tensor)?;
        if code.layers() != manifest.layers {
            return Err(Error::ShapeMismatch(format!(
                "manifest says {} layers, blob has {}",
                manifest.layers,
                code.layers()
            )));
        }
        manifest.split.validate(code.layers())?;
        Ok((code, manifest))
    }
}

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentManifest {
    pub layers: usize,
    pub split: LatentSplit,
    pub space_tag: SpaceTag,
}

/// An additive edit direction with the same shape as the code it modifies.
#[derive(Clone, Debug)]
pub struct LatentDelta {
    tensor: Tensor,
}

impl LatentDelta {
    pub fn new(tensor: Tensor) -> Result<Self> {
        check_latent_shape(&tensor, "latent delta")?;
        check_finite(&tensor, "latent delta")?;
        Ok(Self { tensor })
    }

    pub fn from_graph(tensor: Tensor) -> Result<Self> {
        check_latent_shape(&tensor, "latent delta")?;
        Ok(Self { tensor })
    }

    pub fn zeros_like(code: &LatentCode) -> Result<Self> {
        Ok(Self {
            tensor: code.tensor().zeros_like()?,
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn layers(&self) -> usize {
        self.tensor.dims()[self.tensor.rank() - 2]
    }
}

/// Splits along the layer axis into coarse, medium and fine sub-stacks.
pub fn split_layers(t: &Tensor, split: &LatentSplit) -> Result<(Tensor, Tensor, Tensor)> {
    let layers = check_latent_shape(t, "latent")?;
    split.validate(layers)?;
    let axis = t.rank() - 2;
    let take = |r: &Range<usize>| t.narrow(axis, r.start, r.len());
    Ok((take(&split.coarse)?, take(&split.medium)?, take(&split.fine)?))
}

pub fn split(code: &LatentCode, split: &LatentSplit) -> Result<(Tensor, Tensor, Tensor)> {
    split_layers(code.tensor(), split)
}

/// Inverse of [`split`]: concatenates the three groups along the layer axis.
pub fn merge(coarse: &Tensor, medium: &Tensor, fine: &Tensor) -> Result<LatentCode> {
    LatentCode::from_graph(merge_layers(coarse, medium, fine)?)
}

pub fn merge_layers(coarse: &Tensor, medium: &Tensor, fine: &Tensor) -> Result<Tensor> {
    let rank = coarse.rank();
    for (name, t) in [("coarse", coarse), ("medium", medium), ("fine", fine)] {
        if t.rank() != rank || t.dim(D::Minus1)? != LATENT_WIDTH {
            return Err(Error::ShapeMismatch(format!(
                "{name} slice has shape {:?}, expected width {LATENT_WIDTH} and rank {rank}",
                t.dims()
            )));
        }
    }
    if rank == 3 {
        let b = coarse.dim(0)?;
        if medium.dim(0)? != b || fine.dim(0)? != b {
            return Err(Error::ShapeMismatch("batch sizes differ between slices".into()));
        }
    }
    Ok(Tensor::cat(&[coarse, medium, fine], rank - 2)?)
}

/// `w + d`, elementwise.
pub fn apply_delta(w: &LatentCode, d: &LatentDelta) -> Result<LatentCode> {
    if w.tensor().dims() != d.tensor().dims() {
        return Err(Error::ShapeMismatch(format!(
            "code {:?} vs delta {:?}",
            w.tensor().dims(),
            d.tensor().dims()
        )));
    }
    LatentCode::from_graph((w.tensor() + d.tensor())?)
}
