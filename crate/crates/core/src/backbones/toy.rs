//! Desk-scale stand-ins for the pretrained networks.
//!
//! The toy generator draws a 64x64 "face card": a gray background, a gray
//! face ellipse with two dark eyes, a colored cloth band at the bottom and an
//! optional pair of colored elliptical rims. Everything except the cloth and
//! the rims is achromatic, which is what the toy parser keys on. Edges are
//! sigmoid-smoothed so every pixel is differentiable in the latent code.
//!
//! Only a handful of channels per layer are read; the rest of the 512
//! channels are ignored. Layer 0 holds pose, face width and rim geometry,
//! layer 1 holds skin tone, rim thickness and rim opacity, layer 2 holds
//! background, cloth color and rim color.

use std::sync::Arc;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::ops::sigmoid;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{
    Backbones, FaceParser, FaceRecognizer, Generator, GlassesClassifier, ImageEncoder, Inverter,
    TextEncoder,
};
use crate::error::{Error, Result};
use crate::latent::LATENT_WIDTH;
use crate::mask::MaskImage;
use crate::segmentation::LabelMap;

pub const RESOLUTION: usize = 64;
pub const LAYERS: usize = 3;
pub const ID_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Channel {
    pub layer: usize,
    pub index: usize,
}

const fn ch(layer: usize, index: usize) -> Channel {
    Channel { layer, index }
}

pub const YAW: Channel = ch(0, 0);
pub const PITCH: Channel = ch(0, 1);
pub const FACE_WIDTH: Channel = ch(0, 2);
pub const RIM_X: Channel = ch(0, 3);
pub const RIM_Y: Channel = ch(0, 4);
pub const RIM_HALF_WIDTH: Channel = ch(0, 5);
pub const RIM_HALF_HEIGHT: Channel = ch(0, 6);
pub const SKIN: Channel = ch(1, 0);
pub const RIM_THICKNESS: Channel = ch(1, 1);
pub const RIM_OPACITY: Channel = ch(1, 2);
pub const BACKGROUND: Channel = ch(2, 0);
pub const CLOTH: [Channel; 3] = [ch(2, 1), ch(2, 2), ch(2, 3)];
pub const RIM_COLOR: [Channel; 3] = [ch(2, 4), ch(2, 5), ch(2, 6)];

/// Opacity code the inverter assigns to faces without eyeglasses.
pub const ABSENT_OPACITY_CODE: f64 = -0.1875;
pub const PRESENT_OPACITY_CODE: f64 = 0.25;

// Scene layout, in units of the image side.
const FACE_CX: f64 = 0.5;
const FACE_CY: f64 = 0.47;
const FACE_HALF_HEIGHT: f64 = 0.34;
const EYE_Y: f64 = 0.43;
const EYE_SEP: f64 = 0.115;
const EYE_SHIFT_X: f64 = 0.16;
const EYE_SHIFT_Y: f64 = 0.12;
const EYE_RX: f64 = 0.04;
const EYE_RY: f64 = 0.022;
const EYE_LUMA: f64 = 0.06;
const CLOTH_TOP: f64 = 0.86;
const BRIDGE: f64 = 0.03;
const EDGE_SOFTNESS_PX: f64 = 0.25;
const ELLIPSE_EPS: f64 = 1e-8;
const EYE_THRESHOLD: f64 = 0.2;

// Decoders: value = center + range * tanh(w) unless noted.
const YAW_MAX_DEG: f64 = 30.0;
const PITCH_MAX_DEG: f64 = 20.0;
const FACE_WIDTH_C: (f64, f64) = (0.28, 0.04);
const RIM_X_C: (f64, f64) = (0.5, 0.12);
const RIM_Y_C: (f64, f64) = (EYE_Y, 0.08);
const RIM_A_C: (f64, f64) = (0.10, 0.035);
const RIM_B_C: (f64, f64) = (0.07, 0.025);
const RIM_T_C: (f64, f64) = (0.05, 0.025);
const SKIN_C: (f64, f64) = (0.70, 0.08);
const BACKGROUND_C: (f64, f64) = (0.28, 0.08);
const OPACITY_GAIN: f64 = 12.0;
const COLOR_GAIN: f64 = 6.0;
/// Rim geometry channels are read as `tanh(RIM_GAIN * w)`.
const RIM_GAIN: f64 = 4.0;
/// Logits of the rim color at a zero code, a saturated brown.
const RIM_COLOR_BIAS: [f64; 3] = [0.405_465, -1.098_612, -2.944_439];

// Parser.
const CHROMA_EPS: f64 = 1e-3;
const GLASSES_GAIN: f64 = 40.0;
const GLASSES_CHROMA: f64 = 0.2;
const BAND_TOP: f64 = 0.22;
const BAND_BOTTOM: f64 = 0.68;
const BAND_SOFTNESS: f64 = 0.015;
const LUMA_WIDTH: f64 = 0.12;
const CLOTH_GATE_TOP: f64 = 0.855;
const CLOTH_GATE_SOFTNESS: f64 = 0.01;
const CLOTH_GATE_LOGIT: f64 = 40.0;

// Image encoder.
const COLOR_FEATURE_SCALE: f64 = 10.0;
/// Sharpness of the soft assignment of a chroma direction to color words.
const COLOR_ASSIGN_SHARPNESS: f64 = 8.0;

fn tanh_map(w: f64, (c, r): (f64, f64)) -> f64 {
    c + r * w.tanh()
}

fn tanh_unmap(v: f64, (c, r): (f64, f64)) -> f64 {
    ((v - c) / r).clamp(-0.999, 0.999).atanh()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-4, 1.0 - 1e-4);
    (p / (1.0 - p)).ln()
}

/// Eyeglasses rims in image-side units.
#[derive(Clone, Debug, PartialEq)]
pub struct Rim {
    pub x: f64,
    pub y: f64,
    pub half_width: f64,
    pub half_height: f64,
    pub thickness: f64,
    pub opacity: f64,
    pub color: [f64; 3],
}

impl Rim {
    pub fn lens_centers(&self) -> [(f64, f64); 2] {
        let off = self.half_width + BRIDGE / 2.0;
        [(self.x - off, self.y), (self.x + off, self.y)]
    }

    /// Approximate signed distance to the rim's outer edge, positive inside.
    fn inner_distance(&self, u: f64, v: f64, lens: (f64, f64)) -> f64 {
        let (a, b) = (self.half_width, self.half_height);
        let dx = u - lens.0;
        let dy = v - lens.1;
        let r = (dx * dx / (a * a) + dy * dy / (b * b) + ELLIPSE_EPS).sqrt();
        let g = (dx * dx / a.powi(4) + dy * dy / b.powi(4) + ELLIPSE_EPS).sqrt();
        (1.0 - r) * r / g
    }

    /// Pixels whose centers lie on either rim.
    pub fn mask(&self, resolution: usize) -> MaskImage {
        let n = resolution as f64;
        MaskImage::from_fn(resolution, resolution, |x, y| {
            let (u, v) = ((x as f64 + 0.5) / n, (y as f64 + 0.5) / n);
            self.lens_centers().iter().any(|&lens| {
                let d = self.inner_distance(u, v, lens);
                (0.0..=self.thickness).contains(&d)
            })
        })
    }
}

/// Every quantity the toy generator renders.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyFace {
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub face_half_width: f64,
    pub skin: f64,
    pub background: f64,
    pub cloth: [f64; 3],
    pub rim: Rim,
}

impl ToyFace {
    /// Reads the scene from one `(L, 512)` code laid out row-major.
    pub fn decode(code: &[f64]) -> Result<Self> {
        if code.len() != LAYERS * LATENT_WIDTH {
            return Err(Error::ShapeMismatch(format!(
                "toy code needs {} values, got {}",
                LAYERS * LATENT_WIDTH,
                code.len()
            )));
        }
        let at = |c: Channel| code[c.layer * LATENT_WIDTH + c.index];
        Ok(Self {
            yaw_deg: YAW_MAX_DEG * at(YAW).tanh(),
            pitch_deg: PITCH_MAX_DEG * at(PITCH).tanh(),
            face_half_width: tanh_map(at(FACE_WIDTH), FACE_WIDTH_C),
            skin: tanh_map(at(SKIN), SKIN_C),
            background: tanh_map(at(BACKGROUND), BACKGROUND_C),
            cloth: CLOTH.map(|c| sig(COLOR_GAIN * at(c))),
            rim: Rim {
                x: tanh_map(RIM_GAIN * at(RIM_X), RIM_X_C),
                y: tanh_map(RIM_GAIN * at(RIM_Y), RIM_Y_C),
                half_width: tanh_map(RIM_GAIN * at(RIM_HALF_WIDTH), RIM_A_C),
                half_height: tanh_map(RIM_GAIN * at(RIM_HALF_HEIGHT), RIM_B_C),
                thickness: tanh_map(RIM_GAIN * at(RIM_THICKNESS), RIM_T_C),
                opacity: sig(OPACITY_GAIN * at(RIM_OPACITY)),
                color: [0, 1, 2].map(|i| sig(COLOR_GAIN * at(RIM_COLOR[i]) + RIM_COLOR_BIAS[i])),
            },
        })
    }

    /// Inverse of [`ToyFace::decode`] on the channels the renderer reads;
    /// all other channels are zero.
    pub fn encode(&self) -> Vec<f64> {
        let mut code = vec![0.0; LAYERS * LATENT_WIDTH];
        let mut set = |c: Channel, v: f64| code[c.layer * LATENT_WIDTH + c.index] = v;
        set(YAW, (self.yaw_deg / YAW_MAX_DEG).clamp(-0.999, 0.999).atanh());
        set(PITCH, (self.pitch_deg / PITCH_MAX_DEG).clamp(-0.999, 0.999).atanh());
        set(FACE_WIDTH, tanh_unmap(self.face_half_width, FACE_WIDTH_C));
        set(SKIN, tanh_unmap(self.skin, SKIN_C));
        set(BACKGROUND, tanh_unmap(self.background, BACKGROUND_C));
        for i in 0..3 {
            set(CLOTH[i], logit(self.cloth[i]) / COLOR_GAIN);
            set(RIM_COLOR[i], (logit(self.rim.color[i]) - RIM_COLOR_BIAS[i]) / COLOR_GAIN);
        }
        set(RIM_X, tanh_unmap(self.rim.x, RIM_X_C) / RIM_GAIN);
        set(RIM_Y, tanh_unmap(self.rim.y, RIM_Y_C) / RIM_GAIN);
        set(RIM_HALF_WIDTH, tanh_unmap(self.rim.half_width, RIM_A_C) / RIM_GAIN);
        set(RIM_HALF_HEIGHT, tanh_unmap(self.rim.half_height, RIM_B_C) / RIM_GAIN);
        set(RIM_THICKNESS, tanh_unmap(self.rim.thickness, RIM_T_C) / RIM_GAIN);
        set(RIM_OPACITY, logit(self.rim.opacity) / OPACITY_GAIN);
        code
    }

    pub fn code_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.encode(), (LAYERS, LATENT_WIDTH), device)?.to_dtype(dtype)?)
    }

    /// Where the eyes sit for this pose, as (center x, center y, half separation).
    pub fn eye_layout(&self) -> (f64, f64, f64) {
        eye_layout(self.yaw_deg, self.pitch_deg)
    }

    /// Rims that sit on the eyes of this face.
    pub fn fitted_rim(&self, half_width: f64, half_height: f64, thickness: f64, color: [f64; 3]) -> Rim {
        let (x, y, _) = self.eye_layout();
        Rim {
            x,
            y,
            half_width,
            half_height,
            thickness,
            opacity: sig(OPACITY_GAIN * PRESENT_OPACITY_CODE),
            color,
        }
    }
}

fn eye_layout(yaw_deg: f64, pitch_deg: f64) -> (f64, f64, f64) {
    let (yaw, pitch) = (yaw_deg.to_radians(), pitch_deg.to_radians());
    (
        FACE_CX + EYE_SHIFT_X * yaw.sin(),
        EYE_Y + EYE_SHIFT_Y * pitch.sin(),
        EYE_SEP * yaw.cos(),
    )
}

/// Rim opacity for a code without eyeglasses.
pub fn absent_opacity() -> f64 {
    sig(OPACITY_GAIN * ABSENT_OPACITY_CODE)
}

fn coord_grids(resolution: usize, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
    let n = resolution as f64;
    let coords: Vec<f64> = (0..resolution).map(|i| (i as f64 + 0.5) / n).collect();
    let line = Tensor::from_vec(coords, resolution, device)?.to_dtype(dtype)?;
    let u = line.reshape((1, 1, 1, resolution))?.broadcast_as((1, 1, resolution, resolution))?;
    let v = line.reshape((1, 1, resolution, 1))?.broadcast_as((1, 1, resolution, resolution))?;
    Ok((u.contiguous()?, v.contiguous()?))
}

fn channel(w: &Tensor, c: Channel) -> Result<Tensor> {
    let b = w.dim(0)?;
    Ok(w.narrow(1, c.layer, 1)?.narrow(2, c.index, 1)?.reshape((b, 1, 1, 1))?)
}

fn tanh_map_t(w: &Tensor, (c, r): (f64, f64)) -> Result<Tensor> {
    Ok(w.tanh()?.affine(r, c)?)
}

/// `1 - (1 - a)(1 - b)`.
fn union(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(((a + b)? - (a * b)?)?)
}

/// Soft ellipse interior for center `(cx, cy)` and half-axes `(rx, ry)`.
fn soft_ellipse(
    u: &Tensor,
    v: &Tensor,
    cx: &Tensor,
    cy: &Tensor,
    rx: &Tensor,
    ry: &Tensor,
    scale: &Tensor,
    soft: f64,
) -> Result<Tensor> {
    let dx = u.broadcast_sub(cx)?.broadcast_div(rx)?;
    let dy = v.broadcast_sub(cy)?.broadcast_div(ry)?;
    let r = (dx.sqr()?.broadcast_add(&dy.sqr()?)? + ELLIPSE_EPS)?.sqrt()?;
    let d = r.affine(-1.0, 1.0)?.broadcast_mul(scale)?;
    Ok(sigmoid(&(d / soft)?)?)
}

#[derive(Clone, Debug)]
pub struct ToyGenerator {
    u: Tensor,
    v: Tensor,
    resolution: usize,
}

impl ToyGenerator {
    pub fn new(dtype: DType, device: &Device) -> Result<Self> {
        let (u, v) = coord_grids(RESOLUTION, dtype, device)?;
        Ok(Self {
            u,
            v,
            resolution: RESOLUTION,
        })
    }

    fn soft(&self) -> f64 {
        EDGE_SOFTNESS_PX / self.resolution as f64
    }

    fn rim_alpha(&self, w: &Tensor) -> Result<Tensor> {
        let soft = self.soft();
        let gx = tanh_map_t(&(channel(w, RIM_X)? * RIM_GAIN)?, RIM_X_C)?;
        let gy = tanh_map_t(&(channel(w, RIM_Y)? * RIM_GAIN)?, RIM_Y_C)?;
        let a = tanh_map_t(&(channel(w, RIM_HALF_WIDTH)? * RIM_GAIN)?, RIM_A_C)?;
        let b = tanh_map_t(&(channel(w, RIM_HALF_HEIGHT)? * RIM_GAIN)?, RIM_B_C)?;
        let t = tanh_map_t(&(channel(w, RIM_THICKNESS)? * RIM_GAIN)?, RIM_T_C)?;
        let o = sigmoid(&(channel(w, RIM_OPACITY)? * OPACITY_GAIN)?)?;
        let off = (&a + BRIDGE / 2.0)?;
        let (a2, b2) = (a.sqr()?, b.sqr()?);
        let (a4, b4) = (a2.sqr()?, b2.sqr()?);
        let dy2 = self.v.broadcast_sub(&gy)?.sqr()?;
        let mut lenses = Vec::with_capacity(2);
        for lx in [(&gx - &off)?, (&gx + &off)?] {
            let dx2 = self.u.broadcast_sub(&lx)?.sqr()?;
            let r = (dx2.broadcast_div(&a2)? + dy2.broadcast_div(&b2)?)?;
            let r = (r + ELLIPSE_EPS)?.sqrt()?;
            let g = (dx2.broadcast_div(&a4)? + dy2.broadcast_div(&b4)?)?;
            let g = (g + ELLIPSE_EPS)?.sqrt()?;
            let d = (r.affine(-1.0, 1.0)? * &r)?.div(&g)?;
            let outer = sigmoid(&(&d / soft)?)?;
            let inner = sigmoid(&(d.broadcast_sub(&t)?.neg()? / soft)?)?;
            lenses.push((outer * inner)?);
        }
        Ok(union(&lenses[0], &lenses[1])?.broadcast_mul(&o)?)
    }
}

impl Generator for ToyGenerator {
    fn layers(&self) -> usize {
        LAYERS
    }

    fn resolution(&self) -> usize {
        self.resolution
    }

    fn synthesize(&self, w: &Tensor) -> Result<Tensor> {
        let (b, l, width) = w.dims3()?;
        if l != LAYERS || width != LATENT_WIDTH {
            return Err(Error::ShapeMismatch(format!(
                "toy generator takes (B, {LAYERS}, {LATENT_WIDTH}) codes, got {:?}",
                w.dims()
            )));
        }
        let soft = self.soft();
        let res = self.resolution;
        let deg = std::f64::consts::PI / 180.0;
        let yaw = channel(w, YAW)?.tanh()?.affine(YAW_MAX_DEG * deg, 0.0)?;
        let pitch = channel(w, PITCH)?.tanh()?.affine(PITCH_MAX_DEG * deg, 0.0)?;
        let fw = tanh_map_t(&channel(w, FACE_WIDTH)?, FACE_WIDTH_C)?;
        let skin = tanh_map_t(&channel(w, SKIN)?, SKIN_C)?;
        let bg = tanh_map_t(&channel(w, BACKGROUND)?, BACKGROUND_C)?;

        let dtype = w.dtype();
        let device = w.device();
        let konst = |x: f64| -> Result<Tensor> {
            Ok(Tensor::full(x, (1, 1, 1, 1), device)?.to_dtype(dtype)?)
        };

        let face = soft_ellipse(
            &self.u,
            &self.v,
            &konst(FACE_CX)?,
            &konst(FACE_CY)?,
            &fw,
            &konst(FACE_HALF_HEIGHT)?,
            &fw,
            soft,
        )?;

        let ex = yaw.sin()?.affine(EYE_SHIFT_X, FACE_CX)?;
        let ey = pitch.sin()?.affine(EYE_SHIFT_Y, EYE_Y)?;
        let sep = yaw.cos()?.affine(EYE_SEP, 0.0)?;
        let (erx, ery) = (konst(EYE_RX)?, konst(EYE_RY)?);
        let left = soft_ellipse(&self.u, &self.v, &(&ex - &sep)?, &ey, &erx, &ery, &ery, soft)?;
        let right = soft_ellipse(&self.u, &self.v, &(&ex + &sep)?, &ey, &erx, &ery, &ery, soft)?;
        let eyes = union(&left, &right)?;

        let gray = bg.broadcast_add(&face.broadcast_mul(&(&skin - &bg)?)?)?;
        let gray = (&gray + (eyes * gray.affine(-1.0, EYE_LUMA)?)?)?;
        let rgb = gray.broadcast_as((b, 3, res, res))?;

        let cloth = Tensor::cat(
            &CLOTH
                .iter()
                .map(|&c| channel(w, c))
                .collect::<Result<Vec<_>>>()?,
            1,
        )?;
        let cloth = sigmoid(&(cloth * COLOR_GAIN)?)?;
        let cloth_alpha = sigmoid(&self.v.affine(1.0 / soft, -CLOTH_TOP / soft)?)?;
        let rgb = (&rgb + cloth_alpha.broadcast_mul(&cloth.broadcast_sub(&rgb)?)?)?;

        let rim_color = Tensor::cat(
            &(0..3)
                .map(|i| Ok(channel(w, RIM_COLOR[i])?.affine(COLOR_GAIN, RIM_COLOR_BIAS[i])?))
                .collect::<Result<Vec<_>>>()?,
            1,
        )?;
        let rim_color = sigmoid(&rim_color)?;
        let rim = self.rim_alpha(w)?;
        Ok((&rgb + rim.broadcast_mul(&rim_color.broadcast_sub(&rgb)?)?)?)
    }
}

/// Mean over RGB, `(B, 1, H, W)`.
pub fn luminance(images: &Tensor) -> Result<Tensor> {
    Ok(images.mean_keepdim(1)?)
}

/// Deviation of each pixel from gray, and its smooth magnitude.
fn chroma(images: &Tensor) -> Result<(Tensor, Tensor)> {
    let dev = images.broadcast_sub(&luminance(images)?)?;
    let mag = ((dev.sqr()?.sum_keepdim(1)? + CHROMA_EPS * CHROMA_EPS)?.sqrt()? - CHROMA_EPS)?;
    Ok((dev, mag))
}

/// Labels: background, skin, glasses, eyes, cloth.
#[derive(Clone, Debug)]
pub struct ToyParser {
    labels: LabelMap,
    band: Tensor,
    cloth_logit: Tensor,
}

/// Soft horizontal band of rows where rims can appear, `(1, 1, H, W)`.
fn eye_band(dtype: DType, device: &Device) -> Result<Tensor> {
    let (_, v) = coord_grids(RESOLUTION, dtype, device)?;
    let top = sigmoid(&v.affine(1.0 / BAND_SOFTNESS, -BAND_TOP / BAND_SOFTNESS)?)?;
    let bottom = sigmoid(&v.affine(-1.0 / BAND_SOFTNESS, BAND_BOTTOM / BAND_SOFTNESS)?)?;
    Ok((top * bottom)?)
}

impl ToyParser {
    pub fn new(dtype: DType, device: &Device) -> Result<Self> {
        let (_, v) = coord_grids(RESOLUTION, dtype, device)?;
        let gate = sigmoid(&v.affine(1.0 / CLOTH_GATE_SOFTNESS, -CLOTH_GATE_TOP / CLOTH_GATE_SOFTNESS)?)?;
        Ok(Self {
            labels: LabelMap::toy(),
            band: eye_band(dtype, device)?,
            cloth_logit: gate.affine(CLOTH_GATE_LOGIT, -CLOTH_GATE_LOGIT / 2.0)?,
        })
    }

    /// Probability of the glasses class alone, `(B, 1, H, W)`.
    pub fn glasses_prob(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c) = chroma(images)?;
        let p = sigmoid(&c.affine(GLASSES_GAIN, -GLASSES_GAIN * GLASSES_CHROMA)?)?;
        Ok(p.broadcast_mul(&self.band)?)
    }
}

impl FaceParser for ToyParser {
    fn label_map(&self) -> &LabelMap {
        &self.labels
    }

    fn parse_probs(&self, images: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = images.dims4()?;
        if h != RESOLUTION || w != RESOLUTION {
            return Err(Error::ShapeMismatch(format!("toy parser takes {RESOLUTION}x{RESOLUTION} images")));
        }
        let l = luminance(images)?;
        let well = |center: f64| -> Result<Tensor> {
            Ok(l.affine(1.0 / LUMA_WIDTH, -center / LUMA_WIDTH)?.sqr()?.neg()?)
        };
        let cloth = self.cloth_logit.broadcast_as((b, 1, h, w))?;
        let logits = Tensor::cat(&[well(BACKGROUND_C.0)?, well(SKIN_C.0)?, well(EYE_LUMA)?, cloth], 1)?;
        let q = candle_nn::ops::softmax(&logits, 1)?;
        let pg = self.glasses_prob(images)?;
        let rest = pg.affine(-1.0, 1.0)?;
        let q = q.broadcast_mul(&rest)?;
        Ok(Tensor::cat(
            &[q.narrow(1, 0, 1)?, q.narrow(1, 1, 1)?, pg, q.narrow(1, 2, 1)?, q.narrow(1, 3, 1)?],
            1,
        )?)
    }
}

/// Negative soft rim area.
#[derive(Clone, Debug)]
pub struct ToyClassifier {
    parser: ToyParser,
}

impl GlassesClassifier for ToyClassifier {
    fn score(&self, images: &Tensor) -> Result<Tensor> {
        let b = images.dim(0)?;
        Ok(self.parser.glasses_prob(images)?.reshape((b, ()))?.mean(1)?.neg()?)
    }
}

/// A fixed random projection of the block-averaged luminance.
#[derive(Clone, Debug)]
pub struct ToyRecognizer {
    projection: Tensor,
}

const POOL_GRID: usize = 8;

impl ToyRecognizer {
    pub fn new(dtype: DType, device: &Device) -> Result<Self> {
        let n = POOL_GRID * POOL_GRID;
        let values = seeded_gaussian("toy-recognizer", n * ID_DIM);
        let std = 1.0 / (n as f64).sqrt();
        let t = Tensor::from_vec(values, (n, ID_DIM), device)?.affine(std, 0.0)?;
        Ok(Self {
            projection: t.to_dtype(dtype)?,
        })
    }
}

impl FaceRecognizer for ToyRecognizer {
    fn embedding_dim(&self) -> usize {
        ID_DIM
    }

    fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = images.dims4()?;
        let (kh, kw) = (h / POOL_GRID, w / POOL_GRID);
        let pooled = luminance(images)?
            .reshape((b, POOL_GRID, kh, POOL_GRID, kw))?
            .mean(4)?
            .mean(2)?
            .reshape((b, POOL_GRID * POOL_GRID))?;
        Ok((pooled - 0.5)?.matmul(&self.projection)?)
    }
}

fn seeded_gaussian(key: &str, n: usize) -> Vec<f64> {
    let digest = Sha256::digest(key.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Lowercased alphanumeric words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Bag of words: each token maps to a fixed pseudo-random direction.
#[derive(Clone, Debug)]
pub struct ToyTextEncoder {
    dtype: DType,
    device: Device,
}

impl ToyTextEncoder {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self {
            dtype,
            device: device.clone(),
        }
    }

    pub fn encode_one(&self, prompt: &str) -> Result<Vec<f64>> {
        let tokens = tokenize(prompt);
        if tokens.is_empty() {
            return Err(Error::EmptyInput("prompt"));
        }
        let mut acc = vec![0.0; LATENT_WIDTH];
        for t in &tokens {
            for (a, v) in acc.iter_mut().zip(seeded_gaussian(&format!("toy-token:{t}"), LATENT_WIDTH)) {
                *a += v;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(acc.into_iter().map(|v| v / norm).collect())
    }
}

impl TextEncoder for ToyTextEncoder {
    fn encode(&self, prompts: &[&str]) -> Result<Tensor> {
        if prompts.is_empty() {
            return Err(Error::EmptyInput("prompt batch"));
        }
        let mut data = Vec::with_capacity(prompts.len() * LATENT_WIDTH);
        for p in prompts {
            data.extend(self.encode_one(p)?);
        }
        Ok(Tensor::from_vec(data, (prompts.len(), LATENT_WIDTH), &self.device)?.to_dtype(self.dtype)?)
    }
}

/// Reference RGB for each color word the toy image encoder can see.
pub const COLOR_PROTOTYPES: [(&str, [f64; 3]); 7] = [
    ("red", [0.9, 0.1, 0.1]),
    ("blue", [0.1, 0.2, 0.9]),
    ("green", [0.1, 0.75, 0.2]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("pink", [1.0, 0.5, 0.75]),
    ("orange", [1.0, 0.55, 0.05]),
    ("purple", [0.55, 0.15, 0.8]),
];

/// Unit direction of a color's deviation from gray.
pub fn chroma_direction(rgb: [f64; 3]) -> [f64; 3] {
    let m = rgb.iter().sum::<f64>() / 3.0;
    let d = rgb.map(|c| c - m);
    let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    d.map(|v| v / n)
}

/// Prototype of the first color word in `prompt`.
pub fn prompt_color(prompt: &str) -> Option<[f64; 3]> {
    tokenize(prompt).iter().find_map(|t| {
        COLOR_PROTOTYPES
            .iter()
            .find(|(name, _)| name == t)
            .map(|(_, rgb)| *rgb)
    })
}

/// Embeds an image as the text embedding of "a face" plus each color
/// prompt's embedding weighted by how much of the chroma inside the eye band
/// points along that color. Cloth lies outside the band.
#[derive(Clone, Debug)]
pub struct ToyImageEncoder {
    base: Tensor,
    directions: Tensor,
    color_embeddings: Tensor,
    band: Tensor,
}

impl ToyImageEncoder {
    pub fn new(text: &ToyTextEncoder, dtype: DType, device: &Device) -> Result<Self> {
        let prompts: Vec<String> = COLOR_PROTOTYPES
            .iter()
            .map(|(name, _)| format!("{name} glasses"))
            .collect();
        let refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
        let dirs: Vec<f64> = COLOR_PROTOTYPES
            .iter()
            .flat_map(|(_, rgb)| chroma_direction(*rgb))
            .collect();
        Ok(Self {
            base: text.encode(&["a face"])?,
            directions: Tensor::from_vec(dirs, (COLOR_PROTOTYPES.len(), 3), device)?.to_dtype(dtype)?,
            color_embeddings: text.encode(&refs)?,
            band: eye_band(dtype, device)?,
        })
    }

    /// `(B, K)` color-word weights: the magnitude of the mean chroma inside
    /// the band, shared out over the color words by a sharp softmax of its
    /// cosine with each word's direction.
    pub fn color_features(&self, images: &Tensor) -> Result<Tensor> {
        let (dev, _) = chroma(images)?;
        let (b, c, h, w) = dev.dims4()?;
        let band_mass = self.band.sum_all()?;
        let mean = dev
            .broadcast_mul(&self.band)?
            .reshape((b, c, h * w))?
            .sum(2)?
            .broadcast_div(&band_mass)?;
        let mag = ((mean.sqr()?.sum_keepdim(1)? + CHROMA_EPS * CHROMA_EPS)?.sqrt()? - CHROMA_EPS)?;
        let cos = mean
            .matmul(&self.directions.t()?)?
            .broadcast_div(&(&mag + CHROMA_EPS)?)?;
        let share = candle_nn::ops::softmax(&(cos * COLOR_ASSIGN_SHARPNESS)?, 1)?;
        Ok((share.broadcast_mul(&mag)? * COLOR_FEATURE_SCALE)?)
    }
}

impl ImageEncoder for ToyImageEncoder {
    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let s = self.color_features(images)?;
        let e = s.matmul(&self.color_embeddings)?.broadcast_add(&self.base)?;
        let norm = e.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
        Ok(e.broadcast_div(&norm)?)
    }
}

/// Fills the channels the toy renderer reads from simple image statistics.
/// Rim channels are set to "no eyeglasses"; inverting a face that wears
/// rims does not recover them.
#[derive(Clone, Debug)]
pub struct ToyInverter;

impl ToyInverter {
    pub fn estimate(&self, image: &Tensor) -> Result<ToyFace> {
        let (c, h, w) = image.dims3()?;
        if c != 3 || h != RESOLUTION || w != RESOLUTION {
            return Err(Error::ShapeMismatch(format!("toy inverter takes (3, {RESOLUTION}, {RESOLUTION})")));
        }
        let px = Pixels::new(image)?;
        let lm = px.landmarks()?;
        let n = RESOLUTION as f64;
        let at = |u: f64, v: f64| px.rgb(((u * n) as usize).min(w - 1), ((v * n) as usize).min(h - 1));
        let bg = px.luma(0, 0);
        let skin = {
            let p = at(FACE_CX, 0.72);
            (p[0] + p[1] + p[2]) / 3.0
        };
        let cloth = at(FACE_CX, 0.95);
        let face_half_width = px.face_half_width(bg, skin);
        Ok(ToyFace {
            yaw_deg: lm.yaw_deg,
            pitch_deg: lm.pitch_deg,
            face_half_width,
            skin,
            background: bg,
            cloth,
            rim: Rim {
                x: RIM_X_C.0,
                y: RIM_Y_C.0,
                half_width: RIM_A_C.0,
                half_height: RIM_B_C.0,
                thickness: RIM_T_C.0,
                opacity: absent_opacity(),
                color: RIM_COLOR_BIAS.map(sig),
            },
        })
    }
}

impl Inverter for ToyInverter {
    fn invert(&self, images: &Tensor) -> Result<Tensor> {
        let codes = (0..images.dim(0)?)
            .map(|i| self.estimate(&images.get(i)?)?.code_tensor(images.dtype(), images.device()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&codes, 0)?)
    }
}

/// Face and eye positions found in a toy image.
#[derive(Clone, Debug, PartialEq)]
pub struct Landmarks {
    pub face_center: (f64, f64),
    pub left_eye: (f64, f64),
    pub right_eye: (f64, f64),
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub roll_deg: f64,
}

struct Pixels {
    data: Vec<f64>,
    h: usize,
    w: usize,
}

impl Pixels {
    fn new(image: &Tensor) -> Result<Self> {
        let (_, h, w) = image.dims3()?;
        let data = image.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(Self { data, h, w })
    }

    fn rgb(&self, x: usize, y: usize) -> [f64; 3] {
        let p = self.h * self.w;
        let i = y * self.w + x;
        [self.data[i], self.data[p + i], self.data[2 * p + i]]
    }

    fn luma(&self, x: usize, y: usize) -> f64 {
        self.rgb(x, y).iter().sum::<f64>() / 3.0
    }

    fn chroma(&self, x: usize, y: usize) -> f64 {
        let c = self.rgb(x, y);
        let m = c.iter().sum::<f64>() / 3.0;
        c.iter().map(|v| (v - m) * (v - m)).sum::<f64>().sqrt()
    }

    fn coord(&self, i: usize, n: usize) -> f64 {
        (i as f64 + 0.5) / n as f64
    }

    /// Left edge of the face on the row through its center, refined to
    /// sub-pixel precision by linear interpolation of the luminance ramp.
    fn face_half_width(&self, bg: f64, skin: f64) -> f64 {
        let y = ((FACE_CY * self.h as f64) as usize).min(self.h - 1);
        let mid = (bg + skin) / 2.0;
        for x in 1..self.w / 2 {
            let (l0, l1) = (self.luma(x - 1, y), self.luma(x, y));
            if (l0 - mid) * (l1 - mid) <= 0.0 && l0 != l1 {
                let frac = (mid - l0) / (l1 - l0);
                let edge = self.coord(x - 1, self.w) + frac / self.w as f64;
                return FACE_CX - edge;
            }
        }
        FACE_WIDTH_C.0
    }

    fn landmarks(&self) -> Result<Landmarks> {
        let bg = self.luma(0, 0);
        // Face: bright, achromatic, clearly above the background.
        let mut xs = (usize::MAX, 0);
        let mut ys = (usize::MAX, 0);
        let mut count = 0;
        for y in 0..self.h {
            for x in 0..self.w {
                let l = self.luma(x, y);
                if l > bg + 0.15 && l > 0.45 && self.chroma(x, y) < 0.05 {
                    xs = (xs.0.min(x), xs.1.max(x));
                    ys = (ys.0.min(y), ys.1.max(y));
                    count += 1;
                }
            }
        }
        if count < self.h * self.w / 20 {
            return Err(Error::NoFace("no face-colored region".into()));
        }
        let fx = (self.coord(xs.0, self.w) + self.coord(xs.1, self.w)) / 2.0;
        let fy = (self.coord(ys.0, self.h) + self.coord(ys.1, self.h)) / 2.0;
        // Eyes: dark achromatic pixels inside the face's bounding box,
        // weighted by darkness.
        let hw = (self.coord(xs.1, self.w) - self.coord(xs.0, self.w)) / 2.0;
        let hh = (self.coord(ys.1, self.h) - self.coord(ys.0, self.h)) / 2.0;
        let mut pts = Vec::new();
        for y in ys.0..=ys.1 {
            for x in xs.0..=xs.1 {
                let (u, v) = (self.coord(x, self.w), self.coord(y, self.h));
                let inside = ((u - fx) / hw).powi(2) + ((v - fy) / hh).powi(2) < 0.7;
                let l = self.luma(x, y);
                if inside && l < EYE_THRESHOLD && self.chroma(x, y) < 0.05 {
                    pts.push((u, v, EYE_THRESHOLD - l));
                }
            }
        }
        let centroid = |pts: &[(f64, f64, f64)]| -> Option<(f64, f64)> {
            let total: f64 = pts.iter().map(|p| p.2).sum();
            (total > 0.0).then(|| {
                (
                    pts.iter().map(|p| p.0 * p.2).sum::<f64>() / total,
                    pts.iter().map(|p| p.1 * p.2).sum::<f64>() / total,
                )
            })
        };
        let (mx, _) = centroid(&pts).ok_or_else(|| Error::NoFace("no eyes found".into()))?;
        let (l, r): (Vec<_>, Vec<_>) = pts.iter().partition(|p| p.0 < mx);
        let (left, right) = match (centroid(&l), centroid(&r)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::NoFace("fewer than two eyes".into())),
        };
        let ex = (left.0 + right.0) / 2.0;
        let ey = (left.1 + right.1) / 2.0;
        let eye_row = ey - (fy - FACE_CY);
        let yaw = ((ex - fx) / EYE_SHIFT_X).clamp(-1.0, 1.0).asin().to_degrees();
        let pitch = ((eye_row - EYE_Y) / EYE_SHIFT_Y).clamp(-1.0, 1.0).asin().to_degrees();
        let roll = (right.1 - left.1).atan2(right.0 - left.0).to_degrees();
        Ok(Landmarks {
            face_center: (fx, fy),
            left_eye: left,
            right_eye: right,
            yaw_deg: yaw.clamp(-YAW_MAX_DEG, YAW_MAX_DEG),
            pitch_deg: pitch.clamp(-PITCH_MAX_DEG, PITCH_MAX_DEG),
            roll_deg: roll,
        })
    }
}

/// Landmarks of one `(3, H, W)` toy image.
pub fn landmarks(image: &Tensor) -> Result<Landmarks> {
    Pixels::new(image)?.landmarks()
}

pub fn backbones(dtype: DType, device: &Device) -> Result<Backbones> {
    let text = ToyTextEncoder::new(dtype, device);
    let parser = ToyParser::new(dtype, device)?;
    Ok(Backbones {
        generator: Arc::new(ToyGenerator::new(dtype, device)?),
        inverter: Arc::new(ToyInverter),
        image_encoder: Arc::new(ToyImageEncoder::new(&text, dtype, device)?),
        text_encoder: Arc::new(text),
        classifier: Arc::new(ToyClassifier {
            parser: parser.clone(),
        }),
        parser: Arc::new(parser),
        recognizer: Arc::new(ToyRecognizer::new(dtype, device)?),
    })
}
