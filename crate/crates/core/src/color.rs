//! sRGB to CIELAB (D65) on tensors, differentiable.

use candle_core::Tensor;

use crate::error::{Error, Result};

/// Linear sRGB to XYZ, rows rescaled so that white maps to (1, 1, 1), which
/// folds the D65 white-point normalization into the matrix.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const DELTA: f64 = 6.0 / 29.0;

fn normalized_matrix() -> [[f64; 3]; 3] {
    RGB_TO_XYZ.map(|row| {
        let s: f64 = row.iter().sum();
        row.map(|v| v / s)
    })
}

fn srgb_to_linear(c: &Tensor) -> Result<Tensor> {
    let low = (c / 12.92)?;
    let high = ((c + 0.055)? / 1.055)?.powf(2.4)?;
    Ok(c.le(0.04045)?.where_cond(&low, &high)?)
}

fn lab_f(t: &Tensor) -> Result<Tensor> {
    let d3 = DELTA.powi(3);
    let cube = t.maximum(d3)?.powf(1.0 / 3.0)?;
    let lin = ((t / (3.0 * DELTA * DELTA))? + 4.0 / 29.0)?;
    Ok(t.gt(d3)?.where_cond(&cube, &lin)?)
}

/// Input `(3, H, W)` or `(B, 3, H, W)` with channels R, G, B; output has the
/// same shape with channels L, a, b. Values outside [0, 1] are clamped.
pub fn rgb_to_lab(img: &Tensor) -> Result<Tensor> {
    let cdim = match img.rank() {
        3 => 0,
        4 => 1,
        r => return Err(Error::ShapeMismatch(format!("image of rank {r}"))),
    };
    if img.dim(cdim)? != 3 {
        return Err(Error::ShapeMismatch(format!("{} channels", img.dim(cdim)?)));
    }
    let lin = srgb_to_linear(&img.clamp(0.0, 1.0)?)?;
    let ch: Vec<Tensor> = (0..3)
        .map(|i| lin.narrow(cdim, i, 1))
        .collect::<candle_core::Result<_>>()?;
    let m = normalized_matrix();
    let xyz = m
        .iter()
        .map(|row| -> Result<Tensor> {
            let t = ((&ch[0] * row[0])? + (&ch[1] * row[1])?)?;
            Ok((t + (&ch[2] * row[2])?)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let fx = lab_f(&xyz[0])?;
    let fy = lab_f(&xyz[1])?;
    let fz = lab_f(&xyz[2])?;
    let l = ((&fy * 116.0)? - 16.0)?;
    let a = ((&fx - &fy)? * 500.0)?;
    let b = ((&fy - &fz)? * 200.0)?;
    Ok(Tensor::cat(&[l, a, b], cdim)?)
}
