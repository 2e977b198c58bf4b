//! The three training phases: parameter selection, per-batch objectives and
//! the optimization loop.

use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use serde::Serialize;

use crate::backbones::Backbones;
use crate::checkpoint::{check_compatible, save_checkpoint, Checkpoint, CheckpointManifest};
use crate::config::{Config, StageConfig};
use crate::data::{BatchSampler, Dataset, PromptVocabulary};
use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::losses::{
    background_loss, background_region, classification_loss, clip_nce_loss, disentangle_loss, id_loss,
    latent_norm_loss, normalize_rows, region_tensor, shape_consistency_loss, stage_objective, LossComponents,
    Stage, Term,
};
use crate::mask::MaskImage;
use crate::optim::{Adam, AdamParams};
use crate::model::{GlassModel, DISENTANGLED, EDITING, MASK_ENCODER};
use crate::segmentation::{build_target_label, RegionMasks, SegmentationLabel};

/// Whether parameter `name` is optimized in `stage`.
pub fn is_trainable(stage: Stage, name: &str, cfg: &StageConfig) -> bool {
    let in_mask_encoder = name.starts_with(&format!("{MASK_ENCODER}."));
    let in_editing = name.starts_with(&format!("{EDITING}."));
    match stage {
        Stage::MaskPhase => {
            in_mask_encoder
                || ((name.starts_with(&format!("{EDITING}.coarse."))
                    || name.starts_with(&format!("{EDITING}.medium.")))
                    && name.contains(".mod.mask."))
        }
        Stage::TextPhase => in_editing && (name.contains(".mod.text.") || (cfg.train_trunk && name.contains(".fc."))),
        Stage::Joint => {
            in_editing
                || name.starts_with(&format!("{DISENTANGLED}."))
                || (cfg.train_mask_encoder && in_mask_encoder)
        }
    }
}

/// Freezes everything `stage` does not train.
pub fn select_trainable(stage: Stage, model: &GlassModel, cfg: &StageConfig) {
    model.store.set_trainable(|name| is_trainable(stage, name, cfg));
}

/// Inverted codes, their reconstructions and the parse of each
/// reconstruction, computed once per dataset.
#[derive(Clone, Debug)]
pub struct SourceCache {
    pub w_s: Vec<Tensor>,
    pub images: Vec<Tensor>,
    pub labels: Vec<SegmentationLabel>,
}

impl SourceCache {
    pub fn build(data: &Dataset, backbones: &Backbones, dtype: DType) -> Result<Self> {
        let mut cache = Self {
            w_s: Vec::with_capacity(data.len()),
            images: Vec::with_capacity(data.len()),
            labels: Vec::with_capacity(data.len()),
        };
        for s in &data.samples {
            let img = s.image.tensor().to_dtype(dtype)?.unsqueeze(0)?;
            let w = backbones.inverter.invert(&img)?;
            let rec = backbones.generator.synthesize(&w)?.detach();
            let labels = backbones.parser.parse_labels(&rec)?;
            cache.w_s.push(w.squeeze(0)?);
            cache.images.push(rec.squeeze(0)?);
            cache.labels.extend(labels);
        }
        Ok(cache)
    }
}

/// One training batch with everything the objectives need.
#[derive(Clone, Debug)]
pub struct StepInput {
    pub w_s: Tensor,
    pub source: Tensor,
    pub source_labels: Vec<SegmentationLabel>,
    pub masks: Vec<MaskImage>,
    pub prompts: Vec<String>,
}

impl StepInput {
    pub fn gather(cache: &SourceCache, data: &Dataset, indices: &[usize], prompts: Vec<String>) -> Result<Self> {
        let pick = |v: &[Tensor]| -> Result<Tensor> {
            Ok(Tensor::stack(&indices.iter().map(|&i| v[i].clone()).collect::<Vec<_>>(), 0)?)
        };
        Ok(Self {
            w_s: pick(&cache.w_s)?,
            source: pick(&cache.images)?,
            source_labels: indices.iter().map(|&i| cache.labels[i].clone()).collect(),
            masks: indices.iter().map(|&i| data.samples[i].mask.clone()).collect(),
            prompts,
        })
    }

    fn masks_at(&self, width: usize, height: usize) -> Vec<MaskImage> {
        self.masks
            .iter()
            .map(|m| {
                if m.width() == width && m.height() == height {
                    m.clone()
                } else {
                    m.resize_nearest(width, height)
                }
            })
            .collect()
    }
}

/// Forward results of one batch, kept for inspection.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub components: LossComponents,
    pub w_edit: Tensor,
    pub edited: Tensor,
    pub decoupled: Option<Tensor>,
}

/// Contrastive term: query is the embedding shift from source to edit,
/// positives are the prompt and the mirrored edit, negatives are the other
/// vocabulary prompts.
pub fn nce_term(
    backbones: &Backbones,
    vocab: &PromptVocabulary,
    edited: &Tensor,
    source: &Tensor,
    prompts: &[String],
    tau: f64,
) -> Result<Tensor> {
    let e_edit = backbones.image_encoder.encode(edited)?;
    let e_src = backbones.image_encoder.encode(source)?.detach();
    let q = normalize_rows(&(e_edit - e_src)?)?;
    let refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
    let k_text = backbones.text_encoder.encode(&refs)?;
    let k_image = backbones.image_encoder.encode(&edited.flip(&[3])?)?.detach();
    let mut per = Vec::with_capacity(prompts.len());
    for (i, p) in prompts.iter().enumerate() {
        let negs = vocab.negatives_for(p);
        if negs.is_empty() {
            return Err(Error::NoNegatives);
        }
        let neg_refs: Vec<&str> = negs.iter().map(String::as_str).collect();
        let k_neg = backbones.text_encoder.encode(&neg_refs)?.unsqueeze(0)?;
        per.push(clip_nce_loss(
            &q.narrow(0, i, 1)?,
            &k_text.narrow(0, i, 1)?,
            &k_image.narrow(0, i, 1)?,
            &k_neg,
            tau,
        )?);
    }
    Ok(Tensor::stack(&per, 0)?.mean_all()?)
}

/// Unweighted terms of `stage` for one batch.
pub fn step_losses(
    stage: Stage,
    cfg: &StageConfig,
    model: &GlassModel,
    backbones: &Backbones,
    vocab: &PromptVocabulary,
    input: &StepInput,
) -> Result<StepOutput> {
    let refs: Vec<&str> = input.prompts.iter().map(String::as_str).collect();
    let e_t = backbones.text_encoder.encode(&refs)?;
    let e_m = model.encode_masks(&input.masks.iter().collect::<Vec<_>>())?;
    let (w_edit, w_de) = if stage == Stage::Joint {
        let out = model.forward(&input.w_s, &e_t, &e_m, cfg.gamma)?;
        (out.w_edit, Some(out.w_de))
    } else {
        let delta = model.edit_delta(&input.w_s, &e_t, &e_m, cfg.gamma)?;
        ((&input.w_s + delta)?, None)
    };
    let edited = backbones.generator.synthesize(&w_edit)?;
    let source = &input.source;
    let map = backbones.parser.label_map().clone();
    let (_, _, h, w) = edited.dims4()?;
    let masks = input.masks_at(w, h);
    let mut c = LossComponents::default();
    let terms = stage.terms();

    if terms.contains(&Term::ShapeConsistency) {
        let targets = input
            .source_labels
            .iter()
            .zip(&masks)
            .map(|(l, m)| build_target_label(l, m, &map))
            .collect::<Result<Vec<_>>>()?;
        c.set(Term::ShapeConsistency, shape_consistency_loss(&*backbones.parser, &edited, &targets)?);
    }
    if terms.contains(&Term::Classification) {
        c.set(Term::Classification, classification_loss(&*backbones.classifier, &edited)?);
    }
    if terms.contains(&Term::ClipNce) {
        c.set(Term::ClipNce, nce_term(backbones, vocab, &edited, source, &input.prompts, cfg.tau)?);
    }
    c.set(Term::LatentNorm, latent_norm_loss(&w_edit, &input.w_s)?);
    c.set(Term::Identity, id_loss(&*backbones.recognizer, &edited, source)?);
    let edit_labels = if terms.contains(&Term::Background) || terms.contains(&Term::Disentangle) {
        backbones.parser.parse_labels(&edited)?
    } else {
        Vec::new()
    };
    if terms.contains(&Term::Background) {
        let regions = background_region(&edit_labels, &masks.iter().collect::<Vec<_>>(), map.glasses)?;
        c.set(Term::Background, background_loss(&edited, source, &region_tensor(&regions, &edited)?)?);
    }
    let mut decoupled = None;
    if let (true, Some(w_de)) = (terms.contains(&Term::Disentangle), w_de) {
        let de = backbones.generator.synthesize(&w_de)?;
        let glasses: Vec<MaskImage> = edit_labels
            .iter()
            .map(|l| RegionMasks::from_labels(l, &map).glasses)
            .collect();
        let cloth: Vec<MaskImage> = input
            .source_labels
            .iter()
            .map(|l| RegionMasks::from_labels(l, &map).cloth)
            .collect();
        let (lg, lc) = (cfg.weights.g.unwrap_or(0.0), cfg.weights.c.unwrap_or(0.0));
        c.set(
            Term::Disentangle,
            disentangle_loss(
                &de,
                &edited.detach(),
                source,
                &region_tensor(&glasses, &de)?,
                &region_tensor(&cloth, &de)?,
                lg,
                lc,
            )?,
        );
        decoupled = Some(de);
    }
    Ok(StepOutput {
        components: c,
        w_edit,
        edited,
        decoupled,
    })
}

/// Square root of the summed squared gradients of `vars`.
pub fn global_grad_norm(grads: &GradStore, vars: &[Var]) -> Result<f64> {
    let mut total = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v) {
            total += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
    }
    Ok(total.sqrt())
}

/// Adam with the stage's learning rate and no weight decay.
pub fn optimizer(vars: Vec<Var>, learning_rate: f64) -> Adam {
    Adam::new(
        vars,
        AdamParams {
            lr: learning_rate,
            ..AdamParams::default()
        },
    )
}

#[derive(Clone, Debug, Serialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub total: f64,
    pub components: Vec<(&'static str, f64)>,
    pub grad_norm: f64,
}

impl IterationLog {
    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Where the final (and periodic) checkpoints go.
    pub out_dir: Option<PathBuf>,
    pub checkpoint_every: Option<usize>,
    /// Where a batch producing a non-finite loss is written.
    pub dump_dir: Option<PathBuf>,
    /// Stop after this many iterations in this call, leaving the checkpoint
    /// marked incomplete.
    pub max_steps: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub stage: Stage,
    pub history: Vec<IterationLog>,
    pub final_iteration: usize,
    pub checkpoint: Option<Checkpoint>,
}

fn dump_batch(dir: &Path, iteration: usize, input: &StepInput, components: &LossComponents) -> Result<PathBuf> {
    let dir = dir.join(format!("nonfinite_{iteration:07}"));
    std::fs::create_dir_all(&dir)?;
    for (i, img) in ImageRgb::unbatch(&input.source.to_dtype(DType::F32)?.clamp(0f32, 1f32)?)?
        .iter()
        .enumerate()
    {
        img.save_png(dir.join(format!("source_{i:03}.png")))?;
    }
    for (i, m) in input.masks.iter().enumerate() {
        m.save_png(dir.join(format!("mask_{i:03}.png")))?;
    }
    let values: Vec<(String, String)> = [
        Term::ShapeConsistency,
        Term::Classification,
        Term::ClipNce,
        Term::LatentNorm,
        Term::Identity,
        Term::Background,
        Term::Disentangle,
    ]
    .iter()
    .filter_map(|&t| {
        components.get(t).map(|v| {
            let s = v
                .to_dtype(DType::F64)
                .and_then(|v| v.to_scalar::<f64>())
                .map(|x| x.to_string())
                .unwrap_or_else(|e| e.to_string());
            (t.name().to_string(), s)
        })
    })
    .collect();
    let report = serde_json::json!({
        "iteration": iteration,
        "prompts": input.prompts,
        "components": values,
    });
    std::fs::write(dir.join("batch.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(dir)
}

/// Runs one phase. `prior` is the checkpoint the model was loaded from: the
/// completed prerequisite phase, or an unfinished run of this phase to
/// resume.
pub fn run_stage(
    stage: Stage,
    config: &Config,
    model: &GlassModel,
    backbones: &Backbones,
    data: &Dataset,
    prior: Option<&CheckpointManifest>,
    opts: &RunOptions,
) -> Result<StageReport> {
    let cfg = config.stage(stage);
    cfg.validate(stage)?;
    let start = match (prior, stage.prerequisite()) {
        (Some(m), _) => {
            check_compatible(m, config, stage, false)?;
            if m.stage_id == stage {
                m.iteration
            } else {
                0
            }
        }
        (None, None) => 0,
        (None, Some(req)) => {
            return Err(Error::StageOrder {
                stage: stage.to_string(),
                required: req.to_string(),
            })
        }
    };
    select_trainable(stage, model, cfg);
    let vars = model.store.trainable_vars();
    let mut opt = optimizer(vars.clone(), cfg.learning_rate);
    let cache = SourceCache::build(data, backbones, model.dtype())?;
    let vocab = &config.data.vocabulary;
    let mut sampler = BatchSampler::new(data.len(), cfg.batch_size, cfg.seed)?;
    for _ in 0..start {
        sampler.next_batch(data, vocab)?;
    }
    let end = match opts.max_steps {
        Some(n) => (start + n).min(cfg.iterations),
        None => cfg.iterations,
    };
    tracing::info!(%stage, start, end, trainable = vars.len(), "starting stage");
    let mut history = Vec::with_capacity(end.saturating_sub(start));
    for it in start..end {
        opt.set_learning_rate(cfg.schedule.rate(cfg.learning_rate, it, cfg.iterations));
        let batch = sampler.next_batch(data, vocab)?;
        let input = StepInput::gather(&cache, data, &batch.indices, batch.prompts)?;
        let out = step_losses(stage, cfg, model, backbones, vocab, &input)?;
        let loss = stage_objective(stage, &out.components, &cfg.weights)?;
        let total = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !total.is_finite() {
            let dir = opts.dump_dir.clone().unwrap_or_else(|| PathBuf::from("nonfinite_dumps"));
            let dump = dump_batch(&dir, it, &input, &out.components)?;
            return Err(Error::NonFiniteLoss { iteration: it, dump });
        }
        let grads = loss.backward()?;
        let grad_norm = opt.step(&grads, Some(cfg.grad_clip))?;
        let log = IterationLog {
            iteration: it + 1,
            total,
            components: out.components.values()?,
            grad_norm,
        };
        if cfg.log_every > 0 && (it + 1) % cfg.log_every == 0 {
            let parts: Vec<String> = log.components.iter().map(|(n, v)| format!("{n}={v:.5}")).collect();
            tracing::info!(%stage, iteration = it + 1, total = format!("{total:.5}"), "{}", parts.join(" "));
        }
        history.push(log);
        if let (Some(dir), Some(every)) = (&opts.out_dir, opts.checkpoint_every) {
            if every > 0 && (it + 1) % every == 0 && it + 1 < end {
                save_checkpoint(dir, model, config, stage, it + 1, false)?;
            }
        }
    }
    model.store.unfreeze_all();
    let checkpoint = match &opts.out_dir {
        Some(dir) => Some(save_checkpoint(dir, model, config, stage, end, end == cfg.iterations)?),
        None => None,
    };
    Ok(StageReport {
        stage,
        history,
        final_iteration: end,
        checkpoint,
    })
}
