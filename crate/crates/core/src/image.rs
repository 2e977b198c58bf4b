//! RGB images as `(3, H, W)` tensors with values in [0, 1].

use std::io::Cursor;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{ImageFormat, Rgb, RgbImage};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct ImageRgb {
    tensor: Tensor,
}

impl ImageRgb {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let dims = tensor.dims();
        if dims.len() != 3 || dims[0] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "RGB image must be (3, H, W), got {dims:?}"
            )));
        }
        Ok(Self { tensor })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn height(&self) -> usize {
        self.tensor.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.dims()[2]
    }

    /// Splits a `(B, 3, H, W)` batch into images.
    pub fn unbatch(batch: &Tensor) -> Result<Vec<Self>> {
        let b = batch.dim(0)?;
        (0..b).map(|i| Self::new(batch.get(i)?)).collect()
    }

    pub fn batch(images: &[ImageRgb]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::EmptyInput("image batch"));
        }
        let ts: Vec<&Tensor> = images.iter().map(|i| &i.tensor).collect();
        Ok(Tensor::stack(&ts, 0)?)
    }

    pub fn to_rgb8(&self) -> Result<RgbImage> {
        let (h, w) = (self.height(), self.width());
        let data = self
            .tensor
            .detach()
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        let plane = h * w;
        Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([q(data[i]), q(data[plane + i]), q(data[2 * plane + i])])
        }))
    }

    pub fn from_rgb8(img: &RgbImage, dtype: DType, device: &Device) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0f32; 3 * h * w];
        for (x, y, Rgb(px)) in img.enumerate_pixels() {
            let i = y as usize * w + x as usize;
            for c in 0..3 {
                data[c * h * w + i] = px[c] as f32 / 255.0;
            }
        }
        Self::new(Tensor::from_vec(data, (3, h, w), device)?.to_dtype(dtype)?)
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Cursor::new(Vec::new());
        self.to_rgb8()?.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8], dtype: DType, device: &Device) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        Self::from_rgb8(&img, dtype, device)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>, dtype: DType, device: &Device) -> Result<Self> {
        Self::from_png_bytes(&std::fs::read(path)?, dtype, device)
    }

    /// Quantizes through 8-bit, as a PNG round trip would.
    pub fn quantized(&self) -> Result<Self> {
        Self::from_rgb8(&self.to_rgb8()?, self.tensor.dtype(), self.tensor.device())
    }

    pub fn flip_horizontal(&self) -> Result<Self> {
        Self::new(self.tensor.flip(&[2])?)
    }
}
