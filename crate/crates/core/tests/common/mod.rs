#![allow(dead_code)]

pub mod criteria;

use candle_core::{DType, Device, Tensor, Var};
use eyewear_core::backbones::Backbones;
use eyewear_core::config::Config;
use eyewear_core::data::{Dataset, PrepareOptions};
use eyewear_core::model::GlassModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn cpu() -> Device {
    Device::Cpu
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn close(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    (a - b).abs() <= atol + rtol * a.abs().max(b.abs())
}

/// Toy setup in the given precision: backbones, a model and `n` faces worth of
/// pairs.
pub fn toy_world(faces: usize, seed: u64, dtype: DType) -> (Config, Backbones, GlassModel, Dataset) {
    let cfg = Config::toy();
    let bb = Backbones::toy(dtype, &Device::Cpu).unwrap();
    let model = GlassModel::new(&cfg.model, dtype, &Device::Cpu).unwrap();
    let data = if faces == 0 {
        Dataset { samples: Vec::new() }
    } else {
        Dataset::toy(faces, seed, &*bb.parser, &PrepareOptions::default(), dtype, &Device::Cpu).unwrap()
    };
    (cfg, bb, model, data)
}

/// Adds Gaussian noise to every parameter so that no gradient vanishes just
/// because of the zero-initialized output layers.
pub fn jitter_params(model: &GlassModel, std: f64, seed: u64) {
    let mut r = rng(seed);
    for (_, p) in model.store.iter() {
        let t = p.tensor();
        let noise: Vec<f64> = (0..t.elem_count())
            .map(|_| std * r.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let noise = Tensor::from_vec(noise, t.shape(), t.device())
            .unwrap()
            .to_dtype(t.dtype())
            .unwrap();
        p.var().set(&(t + noise).unwrap()).unwrap();
    }
}

/// Central-difference check of `d f / d var` at `coords` flat indices.
/// Returns the worst relative error.
pub fn fd_check(var: &Var, coords: &[usize], h: f64, f: impl Fn() -> Tensor) -> (f64, Vec<(f64, f64)>) {
    let grads = f().backward().unwrap();
    let g = grads.get(var).map(values).unwrap_or_else(|| vec![0.0; var.elem_count()]);
    let base = values(var.as_tensor());
    let shape = var.shape().clone();
    let set = |vals: &[f64]| {
        let t = Tensor::from_vec(vals.to_vec(), shape.clone(), &Device::Cpu)
            .unwrap()
            .to_dtype(var.dtype())
            .unwrap();
        var.set(&t).unwrap();
    };
    let mut worst: f64 = 0.0;
    let mut pairs = Vec::new();
    for &i in coords {
        let mut v = base.clone();
        v[i] = base[i] + h;
        set(&v);
        let up = scalar(&f());
        v[i] = base[i] - h;
        set(&v);
        let down = scalar(&f());
        set(&base);
        let fd = (up - down) / (2.0 * h);
        let denom = fd.abs().max(g[i].abs());
        let err = if denom < 1e-8 { (fd - g[i]).abs() } else { (fd - g[i]).abs() / denom };
        worst = worst.max(err);
        pairs.push((g[i], fd));
    }
    (worst, pairs)
}

pub fn pick_coords(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    (0..k).map(|_| r.gen_range(0..n)).collect()
}
