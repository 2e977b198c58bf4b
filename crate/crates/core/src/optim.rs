//! Adam with global-norm gradient clipping, applied in one pass over host
//! memory. Same update rule as `candle_nn::AdamW` with zero weight decay.

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var, WithDType};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug)]
struct Slot {
    var: Var,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug)]
pub struct Adam {
    slots: Vec<Slot>,
    params: AdamParams,
    step_t: i32,
}

impl Adam {
    pub fn new(vars: Vec<Var>, params: AdamParams) -> Self {
        let slots = vars
            .into_iter()
            .map(|var| {
                let n = var.elem_count();
                Slot {
                    var,
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                }
            })
            .collect();
        Self {
            slots,
            params,
            step_t: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.params.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.params.lr = lr;
    }

    /// Rescales the gradients to global norm at most `max_norm` (when given)
    /// and applies one update. Returns the norm before clipping. Variables
    /// without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore, max_norm: Option<f64>) -> Result<f64> {
        let gs: Vec<Option<Vec<f64>>> = self
            .slots
            .iter()
            .map(|s| grads.get(&s.var).map(host_f64).transpose())
            .collect::<Result<_>>()?;
        let norm = gs
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let clip = match max_norm {
            Some(m) if norm > m => m / norm,
            _ => 1.0,
        };
        self.step_t += 1;
        let AdamParams { lr, beta1, beta2, eps } = self.params;
        let scale_m = 1.0 / (1.0 - beta1.powi(self.step_t));
        let scale_v = 1.0 / (1.0 - beta2.powi(self.step_t));
        for (slot, g) in self.slots.iter_mut().zip(gs) {
            let Some(g) = g else { continue };
            let Slot { var, m, v } = slot;
            let theta = var.as_tensor();
            let moments = Moments { m, v, beta1, beta2, scale_m, scale_v, eps };
            let next = match theta.dtype() {
                DType::F32 => update::<f32>(theta, &g, moments, clip, lr)?,
                DType::F64 => update::<f64>(theta, &g, moments, clip, lr)?,
                other => return Err(Error::Config(format!("optimizer does not support {other:?}"))),
            };
            var.set(&next)?;
        }
        Ok(norm)
    }
}

fn host_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

struct Moments<'a> {
    m: &'a mut [f64],
    v: &'a mut [f64],
    beta1: f64,
    beta2: f64,
    scale_m: f64,
    scale_v: f64,
    eps: f64,
}

fn update<T: WithDType>(theta: &Tensor, g: &[f64], s: Moments<'_>, clip: f64, lr: f64) -> Result<Tensor> {
    let mut values = theta.flatten_all()?.to_vec1::<T>()?;
    for (i, p) in values.iter_mut().enumerate() {
        let gi = g[i] * clip;
        let m = s.m[i] * s.beta1 + gi * (1.0 - s.beta1);
        let v = s.v[i] * s.beta2 + gi * gi * (1.0 - s.beta2);
        s.m[i] = m;
        s.v[i] = v;
        let adjusted = (m * s.scale_m) / ((v * s.scale_v).sqrt() + s.eps);
        *p = T::from_f64(p.to_f64() - lr * adjusted);
    }
    Ok(Tensor::from_vec(values, theta.shape(), theta.device())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use candle_nn::Optimizer;

    #[test]
    fn matches_candle_adamw() {
        let dev = Device::Cpu;
        let init = Tensor::new(&[[0.3f64, -1.2], [2.0, 0.01]], &dev).unwrap();
        let a = Var::from_tensor(&init).unwrap();
        let b = Var::from_tensor(&init).unwrap();
        let mut ours = Adam::new(vec![a.clone()], AdamParams { lr: 0.05, ..Default::default() });
        let mut theirs = candle_nn::AdamW::new(
            vec![b.clone()],
            candle_nn::ParamsAdamW {
                lr: 0.05,
                weight_decay: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        for _ in 0..20 {
            let la = a.as_tensor().sqr().unwrap().sum_all().unwrap();
            ours.step(&la.backward().unwrap(), None).unwrap();
            let lb = b.as_tensor().sqr().unwrap().sum_all().unwrap();
            theirs.step(&lb.backward().unwrap()).unwrap();
        }
        let diff = (a.as_tensor() - b.as_tensor()).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn clipping_scales_to_max_norm() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::new(&[3.0f64, 4.0], &dev).unwrap()).unwrap();
        let mut opt = Adam::new(vec![x.clone()], AdamParams { lr: 0.0, ..Default::default() });
        let loss = (x.as_tensor() * Tensor::new(&[3.0f64, 4.0], &dev).unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        let norm = opt.step(&loss.backward().unwrap(), Some(1.0)).unwrap();
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((opt.slots[0].m[0] - 0.06).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::new(&[1.5f32, -2.0], &dev).unwrap()).unwrap();
        let before = x.as_tensor().to_vec1::<f32>().unwrap();
        let mut opt = Adam::new(vec![x.clone()], AdamParams::default());
        let loss = (x.as_tensor() * 0.0).unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap(), Some(10.0)).unwrap();
        assert_eq!(x.as_tensor().to_vec1::<f32>().unwrap(), before);
    }
}
