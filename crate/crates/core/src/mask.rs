//! Binary eyeglasses masks.

use std::io::Cursor;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, ImageFormat, Luma};

use crate::error::{Error, Result};

/// An `H x W` grid of {0, 1}; 1 marks the eyeglasses region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

/// What to do with a mask whose resolution differs from the encoder's.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizePolicy {
    #[default]
    Resize,
    Reject,
}

impl MaskImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for a {width}x{height} mask",
                pixels.len()
            )));
        }
        if let Some(&bad) = pixels.iter().find(|&&v| v > 1) {
            return Err(Error::NonBinaryMask(bad));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(u8::from(f(x, y)));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Nearest-neighbour resampling; keeps the mask binary.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        Self::from_fn(width, height, |x, y| {
            let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64).floor() as usize;
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64).floor() as usize;
            self.get(sx.min(self.width - 1), sy.min(self.height - 1)) == 1
        })
    }

    /// Brings the mask to `resolution x resolution` according to `policy`.
    pub fn conform(&self, resolution: usize, policy: ResizePolicy) -> Result<Self> {
        if self.width == resolution && self.height == resolution {
            return Ok(self.clone());
        }
        match policy {
            ResizePolicy::Resize => Ok(self.resize_nearest(resolution, resolution)),
            ResizePolicy::Reject => Err(Error::MaskResolution {
                got_w: self.width,
                got_h: self.height,
                expected: resolution,
            }),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y| {
            self.get(self.width - 1 - x, y) == 1
        })
    }

    pub fn iou(&self, other: &MaskImage) -> Result<f64> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::ShapeMismatch("mask sizes differ".into()));
        }
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.pixels.iter().zip(&other.pixels) {
            inter += (*a & *b) as usize;
            union += (*a | *b) as usize;
        }
        Ok(if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        })
    }

    /// `(1, 1, H, W)` tensor of 0.0 / 1.0.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let data: Vec<f32> = self.pixels.iter().map(|&v| v as f32).collect();
        Ok(Tensor::from_vec(data, (1, 1, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    /// Stacks masks of identical size into `(B, 1, H, W)`.
    pub fn batch_tensor(masks: &[&MaskImage], dtype: DType, device: &Device) -> Result<Tensor> {
        let ts = masks
            .iter()
            .map(|m| m.to_tensor(dtype, device))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&ts, 0)?)
    }

    pub fn from_gray(img: &GrayImage) -> Result<Self> {
        let pixels = img
            .pixels()
            .map(|Luma([v])| match *v {
                0 => Ok(0),
                255 => Ok(1),
                other => Err(Error::NonBinaryMask(other)),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(img.width() as usize, img.height() as usize, pixels)
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([self.get(x as usize, y as usize) * 255])
        })
    }

    /// Single-channel PNG with values {0, 255}.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Cursor::new(Vec::new());
        self.to_gray().write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
        match img {
            image::DynamicImage::ImageLuma8(g) => Self::from_gray(&g),
            other => Self::from_gray(&other.to_luma8()),
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_png_bytes(&std::fs::read(path)?)
    }
}
