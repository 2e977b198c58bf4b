//! Image-quality, identity, segmentation and distribution metrics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::segmentation::SegmentationLabel;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// Value reported for identical images.
pub const PSNR_IDENTICAL: f64 = f64::INFINITY;
/// Cap applied to PSNR in tables.
pub const PSNR_TABLE_CAP: f64 = 100.0;
const FID_RIDGE: f64 = 1e-6;

/// A single-channel image in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// BT.601 luma of an image in [0, 1].
pub fn luma(img: &ImageRgb) -> Result<Plane> {
    let (h, w) = (img.height(), img.width());
    let v = img
        .tensor()
        .to_dtype(candle_core::DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    let n = h * w;
    let data = (0..n)
        .map(|i| 0.299 * v[i] + 0.587 * v[n + i] + 0.114 * v[2 * n + i])
        .collect();
    Ok(Plane {
        width: w,
        height: h,
        data,
    })
}

fn same_size(a: &ImageRgb, b: &ImageRgb) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering: output is `(w - k + 1) x (h - k + 1)`.
fn filter_valid(p: &Plane, taps: &[f64]) -> Plane {
    let k = taps.len();
    let (ow, oh) = (p.width + 1 - k, p.height + 1 - k);
    let mut rows = vec![0.0; ow * p.height];
    for y in 0..p.height {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * p.at(x + i, y)).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    Plane {
        width: ow,
        height: oh,
        data: out,
    }
}

/// Mean SSIM over every full window position, for planes in [0, 1].
pub fn ssim_planes(a: &Plane, b: &Plane) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::ShapeMismatch("planes differ in size".into()));
    }
    let mut k = SSIM_WINDOW.min(a.width).min(a.height);
    if k % 2 == 0 {
        k -= 1;
    }
    if k == 0 {
        return Err(Error::EmptyInput("image"));
    }
    let taps = gaussian_taps(k, SSIM_SIGMA);
    let prod = |f: fn(f64, f64) -> f64| Plane {
        width: a.width,
        height: a.height,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    };
    let mu_a = filter_valid(a, &taps);
    let mu_b = filter_valid(b, &taps);
    let aa = filter_valid(&prod(|x, _| x * x), &taps);
    let bb = filter_valid(&prod(|_, y| y * y), &taps);
    let ab = filter_valid(&prod(|x, y| x * y), &taps);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let n = mu_a.data.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
            let va = aa.data[i] - ma * ma;
            let vb = bb.data[i] - mb * mb;
            let cov = ab.data[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// SSIM on luma with an 11-tap Gaussian window (sigma 1.5). Images smaller
/// than the window use the largest odd window that fits.
pub fn ssim(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    same_size(a, b)?;
    ssim_planes(&luma(a)?, &luma(b)?)
}

/// PSNR in dB with peak value 1 over all channels; infinite for identical
/// images.
pub fn psnr(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    same_size(a, b)?;
    let mse = (a.tensor() - b.tensor())?
        .sqr()?
        .to_dtype(candle_core::DType::F64)?
        .mean_all()?
        .to_scalar::<f64>()?;
    Ok(psnr_from_mse(mse, 1.0))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        PSNR_IDENTICAL
    } else {
        20.0 * (peak / mse.sqrt()).log10()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNormEmbedding);
    }
    Ok(dot / (na * nb))
}

/// Identity similarity: cosine of the two recognizer embeddings.
pub fn ids(embedding_a: &[f64], embedding_b: &[f64]) -> Result<f64> {
    cosine(embedding_a, embedding_b)
}

/// `100 * max(cos(image, text), 0)`.
pub fn clip_score(image_embedding: &[f64], text_embedding: &[f64]) -> Result<f64> {
    Ok(100.0 * cosine(image_embedding, text_embedding)?.max(0.0))
}

fn check_labels(pred: &SegmentationLabel, gt: &SegmentationLabel) -> Result<()> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::ShapeMismatch("label maps differ in size".into()));
    }
    if gt.labels().is_empty() {
        return Err(Error::EmptyInput("label map"));
    }
    Ok(())
}

pub fn pixel_accuracy(pred: &SegmentationLabel, gt: &SegmentationLabel) -> Result<f64> {
    check_labels(pred, gt)?;
    let hits = pred.labels().iter().zip(gt.labels()).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gt.labels().len() as f64)
}

/// Class-wise IoU averaged over the classes present in `gt`.
pub fn mean_iou(pred: &SegmentationLabel, gt: &SegmentationLabel) -> Result<f64> {
    check_labels(pred, gt)?;
    let mut inter = [0usize; 256];
    let mut union = [0usize; 256];
    let mut present = [false; 256];
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        present[g as usize] = true;
        if p == g {
            inter[g as usize] += 1;
            union[g as usize] += 1;
        } else {
            union[g as usize] += 1;
            union[p as usize] += 1;
        }
    }
    let ious: Vec<f64> = (0..256)
        .filter(|&c| present[c])
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Sample mean and unbiased covariance of row vectors.
pub fn gaussian_fit(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::EmptyInput("feature set needs at least two samples"));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::ShapeMismatch("feature vectors differ in length".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Frechet distance between two Gaussians.
pub fn frechet_distance(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> f64 {
    let diff = mu_a - mu_b;
    let ra = sym_sqrt(cov_a);
    let inner = &ra * cov_b * &ra;
    let cross = sym_sqrt(&inner).trace();
    (diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * cross).max(0.0)
}

/// FID between two feature sets. With no more samples than dimensions the
/// covariances are singular; a small ridge is added and a warning logged.
pub fn fid(set_a: &[Vec<f64>], set_b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, mut cov_a) = gaussian_fit(set_a)?;
    let (mu_b, mut cov_b) = gaussian_fit(set_b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::ShapeMismatch("feature sets differ in dimension".into()));
    }
    let d = mu_a.len();
    if set_a.len() <= d || set_b.len() <= d {
        tracing::warn!(
            samples_a = set_a.len(),
            samples_b = set_b.len(),
            dim = d,
            "fewer samples than feature dimensions; regularizing covariances"
        );
        let ridge = DMatrix::identity(d, d) * FID_RIDGE;
        cov_a += &ridge;
        cov_b += &ridge;
    }
    Ok(frechet_distance(&mu_a, &cov_a, &mu_b, &cov_b))
}
