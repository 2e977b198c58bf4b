//! Training losses and the per-stage weighted objectives.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::backbones::{FaceParser, FaceRecognizer, GlassesClassifier};
use crate::color::rgb_to_lab;
use crate::error::{Error, Result};
use crate::mask::MaskImage;
use crate::segmentation::SegmentationLabel;

const LOG_FLOOR: f64 = 1e-12;
const NORM_EPS: f64 = 1e-12;

/// Mean over every pixel of `-sum_c onehot * ln p`.
pub fn cross_entropy(probs: &Tensor, target_onehot: &Tensor) -> Result<Tensor> {
    if probs.dims() != target_onehot.dims() {
        return Err(Error::ShapeMismatch(format!(
            "probabilities {:?} vs targets {:?}",
            probs.dims(),
            target_onehot.dims()
        )));
    }
    let (b, _, h, w) = probs.dims4()?;
    let logp = probs.maximum(LOG_FLOOR)?.log()?;
    let total = (logp * target_onehot)?.sum_all()?;
    Ok((total / -((b * h * w) as f64))?)
}

/// Cross-entropy between the parse of `edited` and the target labels.
pub fn shape_consistency_loss(
    parser: &dyn FaceParser,
    edited: &Tensor,
    targets: &[SegmentationLabel],
) -> Result<Tensor> {
    let map = parser.label_map();
    for t in targets {
        t.validate(map)?;
    }
    let probs = parser.parse_probs(edited)?;
    let onehot = SegmentationLabel::batch_one_hot(targets, map.num_classes(), probs.dtype(), probs.device())?;
    cross_entropy(&probs, &onehot)
}

/// The classifier's score, averaged over the batch. Not bounded below.
pub fn classification_loss(classifier: &dyn GlassesClassifier, edited: &Tensor) -> Result<Tensor> {
    Ok(classifier.score(edited)?.mean_all()?)
}

fn log_sum_exp_rows(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let s = x.broadcast_sub(&max)?.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok((s + max)?.squeeze(D::Minus1)?)
}

/// Contrastive loss from precomputed similarities: `pos_text`, `pos_image`
/// are `(B,)`, `negatives` is `(B, N)`. Returns the batch mean of
/// `-ln[(e^{s_t} + e^{s_i}) / (e^{s_t} + e^{s_i} + sum_n e^{s_n})]` with every
/// similarity divided by `tau`.
pub fn info_nce(pos_text: &Tensor, pos_image: &Tensor, negatives: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidTemperature(tau));
    }
    let (b, n) = negatives.dims2()?;
    if n == 0 {
        return Err(Error::NoNegatives);
    }
    let pos = Tensor::stack(&[pos_text, pos_image], 1)?;
    if pos.dims() != [b, 2] {
        return Err(Error::ShapeMismatch(format!("positives {:?} for {b} rows", pos.dims())));
    }
    let pos = (pos / tau)?;
    let all = Tensor::cat(&[&pos, &(negatives / tau)?], 1)?;
    Ok((log_sum_exp_rows(&all)? - log_sum_exp_rows(&pos)?)?.mean_all()?)
}

fn row_dot(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a * b)?.sum(D::Minus1)?)
}

/// Contrastive loss on embeddings: `q`, `k_text`, `k_image` are `(B, D)`,
/// `k_neg` is `(B, N, D)`.
pub fn clip_nce_loss(q: &Tensor, k_text: &Tensor, k_image: &Tensor, k_neg: &Tensor, tau: f64) -> Result<Tensor> {
    let (_, n, _) = k_neg.dims3()?;
    if n == 0 {
        return Err(Error::NoNegatives);
    }
    let neg = k_neg.broadcast_mul(&q.unsqueeze(1)?)?.sum(D::Minus1)?;
    info_nce(&row_dot(q, k_text)?, &row_dot(q, k_image)?, &neg, tau)
}

/// Rows scaled to unit length.
pub fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + NORM_EPS)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Euclidean norm of `w_edit - w_s` per sample, averaged over the batch.
/// Written as `s / sqrt(s + eps)` with `s` the squared norm, which equals the
/// norm to within `eps / 2s` and has a finite gradient at zero.
pub fn latent_norm_loss(w_edit: &Tensor, w_s: &Tensor) -> Result<Tensor> {
    if w_edit.dims() != w_s.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", w_edit.dims(), w_s.dims())));
    }
    let diff = (w_edit - w_s)?;
    let per = match diff.rank() {
        2 => diff.sqr()?.sum_all()?.unsqueeze(0)?,
        3 => {
            let b = diff.dim(0)?;
            diff.sqr()?.reshape((b, ()))?.sum(1)?
        }
        r => return Err(Error::ShapeMismatch(format!("latent of rank {r}"))),
    };
    let norm = (&per / (&per + NORM_EPS)?.sqrt()?)?;
    Ok(norm.mean_all()?)
}

/// `1 - cos(a, b)` per row, averaged. Fails on a zero-norm row.
pub fn cosine_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let na = a.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nb = b.sqr()?.sum(D::Minus1)?.sqrt()?;
    let min = na
        .minimum(&nb)?
        .to_dtype(DType::F64)?
        .min_all()?
        .to_scalar::<f64>()?;
    if min <= NORM_EPS {
        return Err(Error::ZeroNormEmbedding);
    }
    let cos = (row_dot(a, b)? / (na * nb)?)?;
    Ok(cos.affine(-1.0, 1.0)?.mean_all()?)
}

pub fn id_loss(recognizer: &dyn FaceRecognizer, edited: &Tensor, source: &Tensor) -> Result<Tensor> {
    cosine_distance(&recognizer.embed(edited)?, &recognizer.embed(source)?)
}

/// Mean squared difference over the active pixels of `region`
/// (`(B, 1, H, W)` of 0/1) and all channels. Zero, with a warning, when the
/// region is empty.
pub fn masked_mse(a: &Tensor, b: &Tensor, region: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let channels = a.dim(1)?;
    let count = region.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    let sq = (a - b)?.sqr()?.broadcast_mul(region)?.sum_all()?;
    if count == 0.0 {
        tracing::warn!("empty region in masked MSE; contributing zero");
        return Ok((sq * 0.0)?);
    }
    Ok((sq / (count * channels as f64))?)
}

/// Pixels that are neither parsed as glasses in the edit nor inside the
/// requested mask.
pub fn background_region(edit_labels: &[SegmentationLabel], masks: &[&MaskImage], glasses: u8) -> Result<Vec<MaskImage>> {
    if edit_labels.len() != masks.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} label maps for {} masks",
            edit_labels.len(),
            masks.len()
        )));
    }
    edit_labels
        .iter()
        .zip(masks)
        .map(|(l, m)| {
            if l.width() != m.width() || l.height() != m.height() {
                return Err(Error::ShapeMismatch("label and mask sizes differ".into()));
            }
            let px = l
                .labels()
                .iter()
                .zip(m.pixels())
                .map(|(&c, &mv)| u8::from(c != glasses && mv == 0))
                .collect();
            MaskImage::new(l.width(), l.height(), px)
        })
        .collect()
}

/// Region masks as a `(B, 1, H, W)` tensor matching `like`.
pub fn region_tensor(regions: &[MaskImage], like: &Tensor) -> Result<Tensor> {
    let refs: Vec<&MaskImage> = regions.iter().collect();
    MaskImage::batch_tensor(&refs, like.dtype(), like.device())
}

/// Background MSE between edit and source over `region` (see
/// [`background_region`]).
pub fn background_loss(edited: &Tensor, source: &Tensor, region: &Tensor) -> Result<Tensor> {
    masked_mse(edited, source, region)
}

/// `lambda_g * MSE_lab(I_de, I_edit | glasses of I_edit)
///  + lambda_c * MSE_lab(I_de, I_src | cloth of I_src)`.
#[allow(clippy::too_many_arguments)]
pub fn disentangle_loss(
    decoupled: &Tensor,
    edited: &Tensor,
    source: &Tensor,
    glasses_region: &Tensor,
    cloth_region: &Tensor,
    lambda_g: f64,
    lambda_c: f64,
) -> Result<Tensor> {
    let de = rgb_to_lab(decoupled)?;
    let g = masked_mse(&de, &rgb_to_lab(edited)?, glasses_region)?;
    let c = masked_mse(&de, &rgb_to_lab(source)?, cloth_region)?;
    Ok(((g * lambda_g)? + (c * lambda_c)?)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "stage1-mask")]
    MaskPhase,
    #[serde(rename = "stage1-text")]
    TextPhase,
    #[serde(rename = "stage2")]
    Joint,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::MaskPhase, Stage::TextPhase, Stage::Joint];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::MaskPhase => "stage1-mask",
            Stage::TextPhase => "stage1-text",
            Stage::Joint => "stage2",
        }
    }

    /// The stage whose checkpoint must exist before this one runs.
    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::MaskPhase => None,
            Stage::TextPhase => Some(Stage::MaskPhase),
            Stage::Joint => Some(Stage::TextPhase),
        }
    }

    pub fn terms(self) -> &'static [Term] {
        use Term::*;
        match self {
            Stage::MaskPhase => &[ShapeConsistency, Classification, LatentNorm, Identity, Background],
            Stage::TextPhase => &[ClipNce, LatentNorm, Identity],
            Stage::Joint => &[ClipNce, LatentNorm, Identity, Background, ShapeConsistency, Disentangle],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::UnknownStage(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    ShapeConsistency,
    Classification,
    ClipNce,
    LatentNorm,
    Identity,
    Background,
    Disentangle,
}

impl Term {
    pub fn name(self) -> &'static str {
        match self {
            Term::ShapeConsistency => "sc",
            Term::Classification => "cls",
            Term::ClipNce => "nce",
            Term::LatentNorm => "norm",
            Term::Identity => "id",
            Term::Background => "bg",
            Term::Disentangle => "disentangle",
        }
    }
}

/// Loss weights. A term is active in a stage exactly when its weight is set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cls: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nce: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disentangle: Option<f64>,
    /// Glasses-region weight inside the disentangle loss.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<f64>,
    /// Cloth-region weight inside the disentangle loss.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
}

impl LossWeights {
    pub fn paper(stage: Stage) -> Self {
        match stage {
            Stage::MaskPhase => Self {
                sc: Some(3.0),
                cls: Some(0.03),
                norm: Some(0.8),
                id: Some(0.1),
                bg: Some(2.0),
                ..Self::default()
            },
            Stage::TextPhase => Self {
                nce: Some(0.3),
                norm: Some(0.8),
                id: Some(0.2),
                ..Self::default()
            },
            Stage::Joint => Self {
                nce: Some(0.3),
                norm: Some(0.8),
                id: Some(0.2),
                bg: Some(5.0),
                sc: Some(4.0),
                disentangle: Some(1.0),
                g: Some(4.0),
                c: Some(5.0),
                cls: None,
            },
        }
    }

    pub fn get(&self, term: Term) -> Option<f64> {
        match term {
            Term::ShapeConsistency => self.sc,
            Term::Classification => self.cls,
            Term::ClipNce => self.nce,
            Term::LatentNorm => self.norm,
            Term::Identity => self.id,
            Term::Background => self.bg,
            Term::Disentangle => self.disentangle,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let s = |v: Option<f64>| v.map(|x| x * factor);
        Self {
            sc: s(self.sc),
            cls: s(self.cls),
            nce: s(self.nce),
            norm: s(self.norm),
            id: s(self.id),
            bg: s(self.bg),
            disentangle: s(self.disentangle),
            g: self.g,
            c: self.c,
        }
    }

    /// Every weight of the stage is set, nonnegative and finite, and no
    /// other term has one.
    pub fn validate(&self, stage: Stage) -> Result<()> {
        const ALL: [Term; 7] = [
            Term::ShapeConsistency,
            Term::Classification,
            Term::ClipNce,
            Term::LatentNorm,
            Term::Identity,
            Term::Background,
            Term::Disentangle,
        ];
        let terms = stage.terms();
        for t in ALL {
            match (self.get(t), terms.contains(&t)) {
                (Some(_), false) => {
                    return Err(Error::UnexpectedWeight {
                        term: t.name(),
                        stage: stage.to_string(),
                    })
                }
                (None, true) => {
                    return Err(Error::MissingTerm {
                        term: t.name(),
                        stage: stage.to_string(),
                    })
                }
                (Some(w), true) if !(w >= 0.0 && w.is_finite()) => {
                    return Err(Error::Config(format!("weight for {} must be nonnegative, got {w}", t.name())))
                }
                _ => {}
            }
        }
        let inner = [("g", self.g), ("c", self.c)];
        for (name, v) in inner {
            match (v, stage == Stage::Joint) {
                (Some(_), false) => {
                    return Err(Error::UnexpectedWeight {
                        term: name,
                        stage: stage.to_string(),
                    })
                }
                (None, true) => {
                    return Err(Error::MissingTerm {
                        term: name,
                        stage: stage.to_string(),
                    })
                }
                (Some(w), true) if !(w >= 0.0 && w.is_finite()) => {
                    return Err(Error::Config(format!("weight {name} must be nonnegative, got {w}")))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Unweighted loss values of one batch. Terms not computed are `None`.
#[derive(Clone, Debug, Default)]
pub struct LossComponents {
    pub sc: Option<Tensor>,
    pub cls: Option<Tensor>,
    pub nce: Option<Tensor>,
    pub norm: Option<Tensor>,
    pub id: Option<Tensor>,
    pub bg: Option<Tensor>,
    pub disentangle: Option<Tensor>,
}

impl LossComponents {
    pub fn get(&self, term: Term) -> Option<&Tensor> {
        match term {
            Term::ShapeConsistency => self.sc.as_ref(),
            Term::Classification => self.cls.as_ref(),
            Term::ClipNce => self.nce.as_ref(),
            Term::LatentNorm => self.norm.as_ref(),
            Term::Identity => self.id.as_ref(),
            Term::Background => self.bg.as_ref(),
            Term::Disentangle => self.disentangle.as_ref(),
        }
    }

    pub fn set(&mut self, term: Term, value: Tensor) {
        let slot = match term {
            Term::ShapeConsistency => &mut self.sc,
            Term::Classification => &mut self.cls,
            Term::ClipNce => &mut self.nce,
            Term::LatentNorm => &mut self.norm,
            Term::Identity => &mut self.id,
            Term::Background => &mut self.bg,
            Term::Disentangle => &mut self.disentangle,
        };
        *slot = Some(value);
    }

    /// `(name, value)` pairs of the computed terms.
    pub fn values(&self) -> Result<Vec<(&'static str, f64)>> {
        let mut out = Vec::new();
        for t in [
            Term::ShapeConsistency,
            Term::Classification,
            Term::ClipNce,
            Term::LatentNorm,
            Term::Identity,
            Term::Background,
            Term::Disentangle,
        ] {
            if let Some(v) = self.get(t) {
                out.push((t.name(), v.to_dtype(DType::F64)?.to_scalar::<f64>()?));
            }
        }
        Ok(out)
    }
}

/// Weighted sum of exactly the stage's terms.
pub fn stage_objective(stage: Stage, components: &LossComponents, weights: &LossWeights) -> Result<Tensor> {
    weights.validate(stage)?;
    let mut total: Option<Tensor> = None;
    for &t in stage.terms() {
        let value = components.get(t).ok_or(Error::MissingTerm {
            term: t.name(),
            stage: stage.to_string(),
        })?;
        let w = weights.get(t).expect("validated");
        let part = (value * w)?;
        total = Some(match total {
            None => part,
            Some(acc) => (acc + part)?,
        });
    }
    Ok(total.expect("every stage has terms"))
}
