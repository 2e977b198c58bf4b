//! Dual-condition modulation: mask and text embeddings each produce a
//! (scale, shift) pair, the pairs are blended by a fusion weight, and the
//! blended pair modulates a normalized feature vector.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, Param, ParamStore};

pub const FEATURE_WIDTH: usize = 512;
pub const NORM_EPS: f64 = 1e-5;

/// Blend weight between the mask branch (0) and the text branch (1).
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct FusionWeight(f64);

impl FusionWeight {
    pub const MASK_ONLY: FusionWeight = FusionWeight(0.0);
    pub const TEXT_ONLY: FusionWeight = FusionWeight(1.0);

    pub fn new(gamma: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&gamma) {
            Ok(Self(gamma))
        } else {
            Err(Error::InvalidFusionWeight(gamma))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for FusionWeight {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<FusionWeight> for f64 {
    fn from(g: FusionWeight) -> f64 {
        g.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BranchInit {
    Zero,
    Random { std: f64 },
    /// Random scale half, zero shift half: the modulated block starts out
    /// emitting zero shift.
    ScaleOnly { std: f64 },
}

/// Single affine layer `512 -> 1024`, split into `(alpha, beta)`.
#[derive(Clone, Debug)]
pub struct Branch {
    weight: Param,
    bias: Param,
}

impl Branch {
    pub fn new(store: &mut ParamStore, prefix: &str, init: BranchInit) -> Result<Self> {
        let wname = format!("{prefix}.weight");
        let bname = format!("{prefix}.bias");
        let shape = (FEATURE_WIDTH, 2 * FEATURE_WIDTH);
        let weight = match init {
            BranchInit::Zero => store.create(&wname, shape, Init::Zeros)?,
            BranchInit::Random { std } => store.create(&wname, shape, Init::Normal { std })?,
            BranchInit::ScaleOnly { std } => {
                let full = store.init_tensor(&wname, &shape.into(), Init::Normal { std })?;
                let scale = full.narrow(1, 0, FEATURE_WIDTH)?;
                let shift = scale.zeros_like()?;
                store.insert(&wname, Tensor::cat(&[&scale, &shift], 1)?)?
            }
        };
        let bias = store.create(&bname, (2 * FEATURE_WIDTH,), Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }

    /// `e: (B, 512)` to `(alpha, beta)`, each `(B, 512)`.
    pub fn forward(&self, e: &Tensor) -> Result<(Tensor, Tensor)> {
        if e.dim(D::Minus1)? != FEATURE_WIDTH {
            return Err(Error::ShapeMismatch(format!(
                "condition embedding must have width {FEATURE_WIDTH}, got {:?}",
                e.dims()
            )));
        }
        let out = e
            .matmul(&self.weight.tensor())?
            .broadcast_add(&self.bias.tensor())?;
        let alpha = out.narrow(D::Minus1, 0, FEATURE_WIDTH)?;
        let beta = out.narrow(D::Minus1, FEATURE_WIDTH, FEATURE_WIDTH)?;
        Ok((alpha, beta))
    }
}

pub fn branch_params(e: &Tensor, branch: &Branch) -> Result<(Tensor, Tensor)> {
    branch.forward(e)
}

/// `alpha = (1 - g) * alpha_m + g * alpha_t`, likewise for beta.
///
/// The endpoints return the selected branch unchanged.
pub fn fuse(
    alpha_m: &Tensor,
    beta_m: &Tensor,
    alpha_t: &Tensor,
    beta_t: &Tensor,
    gamma: FusionWeight,
) -> Result<(Tensor, Tensor)> {
    for (a, b) in [(alpha_m, alpha_t), (beta_m, beta_t), (alpha_m, beta_m)] {
        if a.dims() != b.dims() {
            return Err(Error::ShapeMismatch(format!(
                "fusion inputs {:?} vs {:?}",
                a.dims(),
                b.dims()
            )));
        }
    }
    let g = gamma.value();
    if g == 0.0 {
        return Ok((alpha_m.clone(), beta_m.clone()));
    }
    if g == 1.0 {
        return Ok((alpha_t.clone(), beta_t.clone()));
    }
    let alpha = ((alpha_m * (1.0 - g))? + (alpha_t * g)?)?;
    let beta = ((beta_m * (1.0 - g))? + (beta_t * g)?)?;
    Ok((alpha, beta))
}

/// `(1 + alpha) * (x - mean(x)) / sqrt(var(x) + eps) + beta`, statistics taken
/// over the last axis (population variance). `alpha` and `beta` broadcast
/// against `x`.
pub fn modulate(x: &Tensor, alpha: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
    Ok(normed
        .broadcast_mul(&(alpha + 1.0)?)?
        .broadcast_add(beta)?)
}

/// Conditions fed to one modulation module.
#[derive(Clone, Copy, Debug)]
pub struct Conditions<'a> {
    pub mask: Option<&'a Tensor>,
    pub text: &'a Tensor,
    pub gamma: FusionWeight,
}

/// A modulation module with an optional mask branch and a text branch.
/// Without a mask branch it is text-only regardless of `gamma`.
#[derive(Clone, Debug)]
pub struct Modulation {
    mask: Option<Branch>,
    text: Branch,
}

impl Modulation {
    pub fn new(store: &mut ParamStore, prefix: &str, with_mask: bool, init: BranchInit) -> Result<Self> {
        let mask = if with_mask {
            Some(Branch::new(store, &format!("{prefix}.mask"), init)?)
        } else {
            None
        };
        let text = Branch::new(store, &format!("{prefix}.text"), init)?;
        Ok(Self { mask, text })
    }

    pub fn has_mask_branch(&self) -> bool {
        self.mask.is_some()
    }

    /// Fused `(alpha, beta)` of shape `(B, 512)`. A branch whose fusion weight
    /// is exactly zero is not evaluated.
    pub fn scale_shift(&self, cond: &Conditions<'_>) -> Result<(Tensor, Tensor)> {
        match &self.mask {
            None => self.text.forward(cond.text),
            Some(mask_branch) => {
                let g = cond.gamma.value();
                if g == 1.0 {
                    return self.text.forward(cond.text);
                }
                let e_m = cond.mask.ok_or_else(|| {
                    Error::ShapeMismatch("mask-conditioned module called without e_m".into())
                })?;
                let (am, bm) = mask_branch.forward(e_m)?;
                if g == 0.0 {
                    return Ok((am, bm));
                }
                let (at, bt) = self.text.forward(cond.text)?;
                fuse(&am, &bm, &at, &bt, cond.gamma)
            }
        }
    }

    /// Modulates `x: (B, R, 512)` with per-sample conditions.
    pub fn forward(&self, x: &Tensor, cond: &Conditions<'_>) -> Result<Tensor> {
        let (alpha, beta) = self.scale_shift(cond)?;
        let (alpha, beta) = if x.rank() == 3 {
            (alpha.unsqueeze(1)?, beta.unsqueeze(1)?)
        } else {
            (alpha, beta)
        };
        modulate(x, &alpha, &beta)
    }
}
