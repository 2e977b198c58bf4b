//! Evaluation over a test set and the resulting report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{PromptVocabulary, Sample};
use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::inference::Editor;
use crate::metrics;
use crate::segmentation::build_target_label;

/// Which synthesized image is scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scored {
    Edit,
    #[default]
    Decoupled,
}

/// Per-sample metric values. PSNR is capped at 100 dB so that means stay
/// finite.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub clip_score: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub ids: f64,
    pub miou: f64,
    pub pa: f64,
}

impl MetricValues {
    fn mean(values: &[MetricValues]) -> Self {
        let n = values.len().max(1) as f64;
        let sum = |f: fn(&MetricValues) -> f64| values.iter().map(f).sum::<f64>() / n;
        Self {
            clip_score: sum(|v| v.clip_score),
            ssim: sum(|v| v.ssim),
            psnr: sum(|v| v.psnr),
            ids: sum(|v| v.ids),
            miou: sum(|v| v.miou),
            pa: sum(|v| v.pa),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptReport {
    pub prompt: String,
    pub samples: usize,
    pub metrics: MetricValues,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub model_manifest: String,
    pub scored: Scored,
    pub samples: usize,
    pub per_prompt: Vec<PromptReport>,
    pub aggregate: MetricValues,
    /// Set-level, on recognizer embeddings of outputs against inputs. `None`
    /// with fewer than two samples.
    pub fid: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Segmentation table followed by the text-editing table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let a = &self.aggregate;
        let _ = writeln!(out, "{:<24} {:>8} {:>8}", "Prompt", "mIoU", "PA");
        for p in &self.per_prompt {
            let _ = writeln!(out, "{:<24} {:>8.4} {:>8.4}", p.prompt, p.metrics.miou, p.metrics.pa);
        }
        let _ = writeln!(out, "{:<24} {:>8.4} {:>8.4}", format!("all (n={})", self.samples), a.miou, a.pa);
        out.push('\n');
        let _ = writeln!(
            out,
            "{:<24} {:>10} {:>8} {:>8} {:>8} {:>8}",
            "Prompt", "CLIPScore", "SSIM", "PSNR", "IDS", "FID"
        );
        for p in &self.per_prompt {
            let m = &p.metrics;
            let _ = writeln!(
                out,
                "{:<24} {:>10.4} {:>8.4} {:>8.4} {:>8.4} {:>8}",
                p.prompt, m.clip_score, m.ssim, m.psnr, m.ids, "-"
            );
        }
        let fid = self.fid.map_or("-".to_string(), |f| format!("{f:.2}"));
        let _ = writeln!(
            out,
            "{:<24} {:>10.4} {:>8.4} {:>8.4} {:>8.4} {:>8}",
            format!("all (n={})", self.samples),
            a.clip_score,
            a.ssim,
            a.psnr,
            a.ids,
            fid
        );
        out
    }
}

fn row(t: &candle_core::Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?)
}

/// Edits every sample and scores the result against its input. Samples
/// without a prompt cycle through the vocabulary.
pub fn evaluate(editor: &Editor, samples: &[Sample], vocabulary: &PromptVocabulary, scored: Scored) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("test set"));
    }
    let prompts = vocabulary.prompts();
    let bb = &editor.backbones;
    let map = bb.parser.label_map();
    let mut by_prompt: BTreeMap<String, Vec<MetricValues>> = BTreeMap::new();
    let mut all = Vec::with_capacity(samples.len());
    let (mut feats_out, mut feats_in) = (Vec::new(), Vec::new());
    for (i, s) in samples.iter().enumerate() {
        let prompt = match &s.prompt {
            Some(p) => p.clone(),
            None if !prompts.is_empty() => prompts[i % prompts.len()].clone(),
            None => return Err(Error::EmptyInput("prompt vocabulary")),
        };
        let out = editor.edit(&s.image, &s.mask, &prompt, None)?;
        let result = match scored {
            Scored::Edit => &out.edit,
            Scored::Decoupled => &out.decoupled,
        };
        let input = editor.conform_image(&s.image)?;
        let both = ImageRgb::batch(&[result.clone(), input.clone()])?;
        let ids_emb = bb.recognizer.embed(&both)?;
        let (e_out, e_in) = (row(&ids_emb.get(0)?)?, row(&ids_emb.get(1)?)?);
        let img_emb = row(&bb.image_encoder.encode(&both.narrow(0, 0, 1)?)?)?;
        let txt_emb = row(&bb.text_encoder.encode(&[prompt.as_str()])?)?;
        let labels = bb.parser.parse_labels(&both)?;
        let mask = s.mask.resize_nearest(labels[1].width(), labels[1].height());
        let target = build_target_label(&labels[1], &mask, map)?;
        let v = MetricValues {
            clip_score: metrics::clip_score(&img_emb, &txt_emb)?,
            ssim: metrics::ssim(result, &input)?,
            psnr: metrics::psnr(result, &input)?.min(metrics::PSNR_TABLE_CAP),
            ids: metrics::ids(&e_out, &e_in)?,
            miou: metrics::mean_iou(&labels[0], &target)?,
            pa: metrics::pixel_accuracy(&labels[0], &target)?,
        };
        by_prompt.entry(prompt).or_default().push(v);
        all.push(v);
        feats_out.push(e_out);
        feats_in.push(e_in);
    }
    let fid = if samples.len() >= 2 {
        Some(metrics::fid(&feats_out, &feats_in)?)
    } else {
        None
    };
    Ok(EvalReport {
        config_hash: editor.config.hash(),
        model_manifest: editor.manifest_hash.clone(),
        scored,
        samples: samples.len(),
        per_prompt: by_prompt
            .into_iter()
            .map(|(prompt, vs)| PromptReport {
                prompt,
                samples: vs.len(),
                metrics: MetricValues::mean(&vs),
            })
            .collect(),
        aggregate: MetricValues::mean(&all),
        fid,
    })
}
