//! Building (face without eyeglasses, eyeglasses mask, prompt) training pairs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::toy::{self, tokenize, ToyFace, COLOR_PROTOTYPES};
use crate::backbones::{FaceParser, Generator};
use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::mask::MaskImage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptVocabulary {
    pub colors: Vec<String>,
    pub styles: Vec<String>,
    /// `{color}` is replaced by the color word.
    pub template: String,
}

impl Default for PromptVocabulary {
    fn default() -> Self {
        Self {
            colors: ["red", "blue", "green", "yellow", "pink", "orange", "purple"]
                .map(String::from)
                .to_vec(),
            styles: ["metal glasses", "sunglasses"].map(String::from).to_vec(),
            template: "{color} glasses".into(),
        }
    }
}

impl PromptVocabulary {
    pub fn color_prompt(&self, color: &str) -> String {
        self.template.replace("{color}", color)
    }

    /// Every color prompt followed by every style, in vocabulary order.
    pub fn prompts(&self) -> Vec<String> {
        self.colors
            .iter()
            .map(|c| self.color_prompt(c))
            .chain(self.styles.iter().cloned())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.colors.len() + self.styles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_prompt(&self, rng: &mut impl Rng) -> Result<String> {
        if self.is_empty() {
            return Err(Error::EmptyInput("prompt vocabulary"));
        }
        let i = rng.gen_range(0..self.len());
        Ok(self.prompts().swap_remove(i))
    }

    /// Index of the vocabulary entry a free-form prompt refers to: the first
    /// entry whose distinguishing words all occur in the prompt.
    pub fn entry_of(&self, prompt: &str) -> Option<usize> {
        let words = tokenize(prompt);
        let has = |w: &str| words.iter().any(|t| t == w);
        if let Some(i) = self.colors.iter().position(|c| has(&c.to_lowercase())) {
            return Some(i);
        }
        self.styles
            .iter()
            .position(|s| tokenize(s).iter().all(|w| has(w)))
            .map(|i| self.colors.len() + i)
    }

    /// The vocabulary prompts that refer to a different entry than `prompt`.
    pub fn negatives_for(&self, prompt: &str) -> Vec<String> {
        let own = self.entry_of(prompt);
        self.prompts()
            .into_iter()
            .enumerate()
            .filter(|(i, p)| Some(*i) != own && p != prompt)
            .map(|(_, p)| p)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub yaw: f64,
    pub pitch: f64,
    #[serde(default)]
    pub roll: f64,
}

impl Pose {
    /// Euclidean distance in (yaw, pitch), degrees.
    pub fn distance(&self, other: &Pose) -> f64 {
        (self.yaw - other.yaw).hypot(self.pitch - other.pitch)
    }
}

/// Pose from eye and face-outline geometry. Calibrated for the toy renderer.
pub fn estimate_pose(image: &ImageRgb) -> Result<Pose> {
    let lm = toy::landmarks(image.tensor())?;
    Ok(Pose {
        yaw: lm.yaw_deg,
        pitch: lm.pitch_deg,
        roll: lm.roll_deg,
    })
}

/// Binary mask of the pixels the parser labels as eyeglasses.
pub fn extract_mask(image: &ImageRgb, parser: &dyn FaceParser) -> Result<MaskImage> {
    let labels = parser.parse_labels(&image.tensor().unsqueeze(0)?)?;
    let mask = labels[0].region(parser.label_map().glasses);
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(mask)
}

/// Partition by eyeglasses presence. Entries the predicate cannot decide are
/// skipped and logged.
pub fn split_by_eyeglasses<T: Clone>(
    items: &[T],
    mut has_glasses: impl FnMut(&T) -> Result<bool>,
) -> (Vec<T>, Vec<T>) {
    let (mut with, mut without) = (Vec::new(), Vec::new());
    let mut skipped = 0;
    for item in items {
        match has_glasses(item) {
            Ok(true) => with.push(item.clone()),
            Ok(false) => without.push(item.clone()),
            Err(e) => {
                skipped += 1;
                tracing::warn!("skipping unreadable corpus entry: {e}");
            }
        }
    }
    tracing::info!(with = with.len(), without = without.len(), skipped, "split corpus by eyeglasses");
    (with, without)
}

/// Face index, mask index and pose distance of one pairing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pairing {
    pub face: usize,
    pub mask: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairingResult {
    pub pairs: Vec<Pairing>,
    pub skipped: usize,
}

/// Each face gets the pose-nearest mask (lowest index on ties) if it lies
/// within `threshold_deg`; masks may be shared between faces.
pub fn build_pairs(faces: &[Pose], masks: &[Pose], threshold_deg: f64) -> Result<PairingResult> {
    if faces.is_empty() {
        return Err(Error::EmptyInput("face pool"));
    }
    if masks.is_empty() {
        return Err(Error::EmptyInput("mask pool"));
    }
    let mut out = PairingResult::default();
    for (fi, f) in faces.iter().enumerate() {
        let (mi, d) = masks
            .iter()
            .enumerate()
            .map(|(mi, m)| (mi, f.distance(m)))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
        if d <= threshold_deg {
            out.pairs.push(Pairing {
                face: fi,
                mask: mi,
                distance: d,
            });
        } else {
            out.skipped += 1;
        }
    }
    tracing::info!(pairs = out.pairs.len(), skipped = out.skipped, "built pose-matched pairs");
    Ok(out)
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPair {
    pub face_path: PathBuf,
    pub mask_path: PathBuf,
    pub yaw: f64,
    pub pitch: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
}

pub fn write_manifest(path: impl AsRef<Path>, pairs: &[DataPair]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<DataPair>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// One image of a corpus with optional eyeglasses annotation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub file: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub has_glasses: Option<bool>,
    /// Known pose; estimated from the image when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<Pose>,
}

pub const CORPUS_INDEX: &str = "corpus.json";

/// Random toy faces; every other one wears rims sitting on its eyes.
pub fn sample_toy_faces(n: usize, seed: u64) -> Vec<(ToyFace, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = ToyFace::decode(&vec![0.0; toy::LAYERS * crate::latent::LATENT_WIDTH]).expect("valid size");
    (0..n)
        .map(|i| {
            let mut f = base.clone();
            f.yaw_deg = rng.gen_range(-25.0..25.0);
            f.pitch_deg = rng.gen_range(-15.0..15.0);
            f.face_half_width = rng.gen_range(0.25..0.31);
            f.skin = rng.gen_range(0.64..0.76);
            f.background = rng.gen_range(0.22..0.34);
            f.cloth = [0; 3].map(|_| rng.gen_range(0.15..0.85));
            let glasses = i % 2 == 0;
            if glasses {
                let (_, rgb) = COLOR_PROTOTYPES[rng.gen_range(0..COLOR_PROTOTYPES.len())];
                let color = rgb.map(|c: f64| (c + rng.gen_range(-0.05..0.05)).clamp(0.02, 0.98));
                let mut rim = f.fitted_rim(
                    rng.gen_range(0.08..0.12),
                    rng.gen_range(0.055..0.085),
                    rng.gen_range(0.035..0.065),
                    color,
                );
                rim.x += rng.gen_range(-0.01..0.01);
                rim.y += rng.gen_range(-0.01..0.01);
                f.rim = rim;
            } else {
                f.rim.opacity = 0.0;
            }
            (f, glasses)
        })
        .collect()
}

/// Rim shapes on a frontal face: (name, half width, half height, thickness).
pub const PRESET_SHAPES: [(&str, f64, f64, f64); 3] = [
    ("round", 0.085, 0.085, 0.045),
    ("oval", 0.10, 0.07, 0.05),
    ("wide", 0.12, 0.06, 0.04),
];

/// Default masks offered to clients, drawn at `resolution`.
pub fn preset_masks(resolution: usize) -> Vec<(&'static str, MaskImage)> {
    let face = ToyFace::decode(&vec![0.0; toy::LAYERS * crate::latent::LATENT_WIDTH]).expect("valid size");
    PRESET_SHAPES
        .iter()
        .map(|&(name, a, b, t)| (name, face.fitted_rim(a, b, t, [0.0; 3]).mask(resolution)))
        .collect()
}

impl ToyFace {
    pub fn pose(&self) -> Pose {
        Pose {
            yaw: self.yaw_deg,
            pitch: self.pitch_deg,
            roll: 0.0,
        }
    }
}

/// Renders toy faces to `dir` with an annotated index.
pub fn write_toy_corpus(dir: impl AsRef<Path>, n: usize, seed: u64) -> Result<Vec<CorpusEntry>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let generator = toy::ToyGenerator::new(DType::F32, &Device::Cpu)?;
    let faces = sample_toy_faces(n, seed);
    let mut entries = Vec::with_capacity(n);
    for (i, (face, glasses)) in faces.iter().enumerate() {
        let w = face.code_tensor(DType::F32, &Device::Cpu)?.unsqueeze(0)?;
        let img = ImageRgb::new(generator.synthesize(&w)?.squeeze(0)?)?;
        let file = PathBuf::from(format!("face_{i:05}.png"));
        img.save_png(dir.join(&file))?;
        entries.push(CorpusEntry {
            file,
            has_glasses: Some(*glasses),
            pose: Some(face.pose()),
        });
    }
    std::fs::write(dir.join(CORPUS_INDEX), serde_json::to_string_pretty(&entries)?)?;
    Ok(entries)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareOptions {
    pub pose_threshold_deg: f64,
    pub seed: u64,
    pub vocabulary: PromptVocabulary,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            pose_threshold_deg: 15.0,
            seed: 0,
            vocabulary: PromptVocabulary::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub with_glasses: usize,
    pub without_glasses: usize,
    pub masks: usize,
    pub pairs: usize,
    pub skipped_faces: usize,
}

/// Corpus directory to `out_dir/manifest.jsonl` plus extracted masks.
/// Annotated entries are split by their annotation, the rest by whether
/// the parser finds eyeglasses pixels.
pub fn prepare_data(
    corpus_dir: &Path,
    out_dir: &Path,
    parser: &dyn FaceParser,
    opts: &PrepareOptions,
) -> Result<PrepareSummary> {
    let entries: Vec<CorpusEntry> =
        serde_json::from_str(&std::fs::read_to_string(corpus_dir.join(CORPUS_INDEX))?)?;
    let load = |e: &CorpusEntry| ImageRgb::load_png(corpus_dir.join(&e.file), DType::F32, &Device::Cpu);
    let (with, without) = split_by_eyeglasses(&entries, |e| match e.has_glasses {
        Some(g) => Ok(g),
        None => Ok(extract_mask(&load(e)?, parser).is_ok()),
    });
    std::fs::create_dir_all(out_dir.join("masks"))?;
    let mut mask_files = Vec::new();
    let mut mask_poses = Vec::new();
    for e in &with {
        let img = load(e)?;
        let pose = e.pose.map(Ok).unwrap_or_else(|| estimate_pose(&img));
        let (mask, pose) = match (extract_mask(&img, parser), pose) {
            (Ok(m), Ok(p)) => (m, p),
            (Err(err), _) | (_, Err(err)) => {
                tracing::warn!(file = %e.file.display(), "dropped from mask pool: {err}");
                continue;
            }
        };
        let name = PathBuf::from("masks").join(&e.file);
        mask.save_png(out_dir.join(&name))?;
        mask_files.push(name);
        mask_poses.push(pose);
    }
    let mut face_files = Vec::new();
    let mut face_poses = Vec::new();
    for e in &without {
        let pose = match e.pose {
            Some(p) => Ok(p),
            None => estimate_pose(&load(e)?),
        };
        match pose {
            Ok(p) => {
                face_files.push(e.file.clone());
                face_poses.push(p);
            }
            Err(err) => tracing::warn!(file = %e.file.display(), "dropped face: {err}"),
        }
    }
    let result = build_pairs(&face_poses, &mask_poses, opts.pose_threshold_deg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let abs_corpus = std::fs::canonicalize(corpus_dir)?;
    let pairs = result
        .pairs
        .iter()
        .map(|p| {
            Ok(DataPair {
                face_path: abs_corpus.join(&face_files[p.face]),
                mask_path: mask_files[p.mask].clone(),
                yaw: face_poses[p.face].yaw,
                pitch: face_poses[p.face].pitch,
                prompt: Some(opts.vocabulary.sample_prompt(&mut rng)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_manifest(out_dir.join("manifest.jsonl"), &pairs)?;
    Ok(PrepareSummary {
        with_glasses: with.len(),
        without_glasses: without.len(),
        masks: mask_files.len(),
        pairs: pairs.len(),
        skipped_faces: result.skipped,
    })
}

/// A loaded training or test example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: ImageRgb,
    pub mask: MaskImage,
    pub pose: Pose,
    pub prompt: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Loads a manifest; relative mask paths resolve against the manifest's
    /// directory.
    pub fn from_manifest(path: impl AsRef<Path>, dtype: DType, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let samples = read_manifest(path)?
            .into_iter()
            .map(|p| {
                Ok(Sample {
                    image: ImageRgb::load_png(base.join(&p.face_path), dtype, device)?,
                    mask: MaskImage::load_png(base.join(&p.mask_path))?,
                    pose: Pose {
                        yaw: p.yaw,
                        pitch: p.pitch,
                        roll: 0.0,
                    },
                    prompt: p.prompt,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples })
    }

    /// Renders `n` toy faces in memory and pairs them exactly as
    /// [`prepare_data`] would.
    pub fn toy(
        n: usize,
        seed: u64,
        parser: &dyn FaceParser,
        opts: &PrepareOptions,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let generator = toy::ToyGenerator::new(dtype, device)?;
        let faces = sample_toy_faces(n, seed);
        let mut masks = Vec::new();
        let mut mask_poses = Vec::new();
        let mut plain = Vec::new();
        let mut plain_poses = Vec::new();
        for (face, glasses) in &faces {
            let w = face.code_tensor(dtype, device)?.unsqueeze(0)?;
            let img = ImageRgb::new(generator.synthesize(&w)?.squeeze(0)?)?.quantized()?;
            let pose = face.pose();
            if *glasses {
                if let Ok(m) = extract_mask(&img, parser) {
                    masks.push(m);
                    mask_poses.push(pose);
                }
            } else {
                plain.push(img);
                plain_poses.push(pose);
            }
        }
        let result = build_pairs(&plain_poses, &mask_poses, opts.pose_threshold_deg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let samples = result
            .pairs
            .iter()
            .map(|p| {
                Ok(Sample {
                    image: plain[p.face].clone(),
                    mask: masks[p.mask].clone(),
                    pose: plain_poses[p.face],
                    prompt: Some(opts.vocabulary.sample_prompt(&mut rng)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Deterministic split into `(first, rest)` with `n` samples held out
    /// at the end.
    pub fn split_off(mut self, n: usize) -> (Self, Self) {
        let at = self.samples.len().saturating_sub(n);
        let tail = self.samples.split_off(at);
        (self, Self { samples: tail })
    }
}

/// A stacked batch with one prompt per sample.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub masks: Vec<MaskImage>,
    pub prompts: Vec<String>,
    pub indices: Vec<usize>,
}

/// Seeded epoch shuffling; prompts missing from a sample are drawn from the
/// vocabulary with the same generator.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::EmptyInput("dataset"));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            cursor: 0,
            batch_size,
        }
        .with_len(len))
    }

    fn with_len(mut self, len: usize) -> Self {
        self.order = (0..len).collect();
        self.cursor = len;
        self
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        (0..self.batch_size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }

    pub fn next_batch(&mut self, data: &Dataset, vocab: &PromptVocabulary) -> Result<Batch> {
        let indices = self.next_indices();
        let images: Vec<ImageRgb> = indices.iter().map(|&i| data.samples[i].image.clone()).collect();
        let masks = indices.iter().map(|&i| data.samples[i].mask.clone()).collect();
        let prompts = indices
            .iter()
            .map(|&i| match &data.samples[i].prompt {
                Some(p) => Ok(p.clone()),
                None => vocab.sample_prompt(&mut self.rng),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            images: ImageRgb::batch(&images)?,
            masks,
            prompts,
            indices,
        })
    }
}

/// Counts per prompt, for logging.
pub fn prompt_histogram(prompts: &[String]) -> BTreeMap<String, usize> {
    let mut h = BTreeMap::new();
    for p in prompts {
        *h.entry(p.clone()).or_insert(0) += 1;
    }
    h
}
