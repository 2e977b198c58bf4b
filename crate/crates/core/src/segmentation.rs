//! Per-pixel category maps and the region masks derived from them.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::MaskImage;

/// Category ids of a face parser.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub names: Vec<String>,
    pub background: u8,
    pub skin: u8,
    pub glasses: u8,
    /// Some parsers label the two eyes separately.
    pub eyes: Vec<u8>,
    pub cloth: u8,
}

impl LabelMap {
    /// Background, skin, glasses, eyes, cloth.
    pub fn toy() -> Self {
        Self {
            names: ["background", "skin", "glasses", "eyes", "cloth"]
                .map(String::from)
                .to_vec(),
            background: 0,
            skin: 1,
            glasses: 2,
            eyes: vec![3],
            cloth: 4,
        }
    }

    /// The 19-class CelebAMask-HQ layout.
    pub fn celebamask_hq() -> Self {
        let names = [
            "background", "skin", "nose", "eye_g", "l_eye", "r_eye", "l_brow", "r_brow", "l_ear",
            "r_ear", "mouth", "u_lip", "l_lip", "hair", "hat", "ear_r", "neck_l", "neck", "cloth",
        ];
        Self {
            names: names.map(String::from).to_vec(),
            background: 0,
            skin: 1,
            glasses: 3,
            eyes: vec![4, 5],
            cloth: 18,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn is_eye(&self, label: u8) -> bool {
        self.eyes.contains(&label)
    }

    pub fn check(&self, label: u8) -> Result<()> {
        if (label as usize) < self.num_classes() {
            Ok(())
        } else {
            Err(Error::InvalidLabel(label))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationLabel {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl SegmentationLabel {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for a {width}x{height} grid",
                labels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn validate(&self, map: &LabelMap) -> Result<()> {
        self.labels.iter().try_for_each(|&l| map.check(l))
    }

    /// Pixels equal to `label`, as a mask.
    pub fn region(&self, label: u8) -> MaskImage {
        MaskImage::new(
            self.width,
            self.height,
            self.labels.iter().map(|&l| u8::from(l == label)).collect(),
        )
        .expect("sizes match")
    }

    /// `(1, C, H, W)` one-hot encoding.
    pub fn one_hot(&self, num_classes: usize, dtype: DType, device: &Device) -> Result<Tensor> {
        let plane = self.width * self.height;
        let mut data = vec![0f32; num_classes * plane];
        for (i, &l) in self.labels.iter().enumerate() {
            if l as usize >= num_classes {
                return Err(Error::InvalidLabel(l));
            }
            data[l as usize * plane + i] = 1.0;
        }
        Ok(Tensor::from_vec(data, (1, num_classes, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    pub fn batch_one_hot(
        labels: &[SegmentationLabel],
        num_classes: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Tensor> {
        let ts = labels
            .iter()
            .map(|l| l.one_hot(num_classes, dtype, device))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&ts, 0)?)
    }

    /// Argmax over the class axis of a `(C, H, W)` probability map.
    pub fn from_probs(probs: &Tensor) -> Result<Self> {
        let (_, h, w) = probs.dims3()?;
        let labels = probs
            .detach()
            .argmax(0)?
            .flatten_all()?
            .to_vec1::<u32>()?
            .into_iter()
            .map(|v| v as u8)
            .collect();
        Self::new(w, h, labels)
    }
}

/// Target label: mask pixels become glasses unless the source says eye.
pub fn build_target_label(
    source: &SegmentationLabel,
    mask: &MaskImage,
    map: &LabelMap,
) -> Result<SegmentationLabel> {
    if source.width != mask.width() || source.height != mask.height() {
        return Err(Error::ShapeMismatch(format!(
            "label {}x{} vs mask {}x{}",
            source.width,
            source.height,
            mask.width(),
            mask.height()
        )));
    }
    let labels = source
        .labels
        .iter()
        .zip(mask.pixels())
        .map(|(&s, &m)| {
            if m == 1 && !map.is_eye(s) {
                map.glasses
            } else {
                s
            }
        })
        .collect();
    SegmentationLabel::new(source.width, source.height, labels)
}

/// Binary region masks used by the background and disentangle losses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMasks {
    pub glasses: MaskImage,
    pub cloth: MaskImage,
    pub non_glasses: MaskImage,
}

impl RegionMasks {
    pub fn from_labels(labels: &SegmentationLabel, map: &LabelMap) -> Self {
        let glasses = labels.region(map.glasses);
        let non_glasses = MaskImage::new(
            labels.width,
            labels.height,
            glasses.pixels().iter().map(|&g| 1 - g).collect(),
        )
        .expect("sizes match");
        Self {
            glasses,
            cloth: labels.region(map.cloth),
            non_glasses,
        }
    }
}
