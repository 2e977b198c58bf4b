//! Named, freezable trainable parameters.
//!
//! Every learnable tensor in the model lives in one [`ParamStore`] under a
//! dotted name (`editing.coarse.block0.fc.weight`). A frozen parameter hands out
//! a detached view of its value, so no gradient is ever computed for it and the
//! optimizer never sees it.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal { std: f64 },
}

#[derive(Clone, Debug)]
pub struct Param {
    name: Arc<str>,
    var: Var,
    frozen: Arc<AtomicBool>,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    /// Current value. Tracked by autodiff unless frozen.
    pub fn tensor(&self) -> Tensor {
        if self.is_frozen() {
            self.var.as_tensor().detach()
        } else {
            self.var.as_tensor().clone()
        }
    }

    pub fn var(&self) -> &Var {
        &self.var
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.load(Ordering::Relaxed)
    }

    pub fn set_frozen(&self, frozen: bool) {
        self.frozen.store(frozen, Ordering::Relaxed);
    }
}

/// Deterministic parameter registry.
///
/// Initial values depend only on the store seed and the parameter name, never
/// on construction order.
#[derive(Debug)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            params: BTreeMap::new(),
            seed,
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn create(&mut self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Param> {
        let shape = shape.into();
        let tensor = self.init_tensor(name, &shape, init)?;
        self.insert(name, tensor)
    }

    /// Registers an explicitly constructed initial value.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<Param> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let param = Param {
            name: name.into(),
            var: Var::from_tensor(&value.to_dtype(self.dtype)?)?,
            frozen: Arc::new(AtomicBool::new(false)),
        };
        self.params.insert(name.to_string(), param.clone());
        Ok(param)
    }

    pub fn init_tensor(&self, name: &str, shape: &Shape, init: Init) -> Result<Tensor> {
        let n = shape.elem_count();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal { std } => {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.name_seed(name));
                let normal = Normal::new(0.0, std)
                    .map_err(|e| Error::Config(format!("init of `{name}`: {e}")))?;
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            }
        };
        Ok(Tensor::from_vec(data, shape.clone(), &self.device)?.to_dtype(self.dtype)?)
    }

    fn name_seed(&self, name: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(name.as_bytes());
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Freezes every parameter for which `trainable` returns false and
    /// unfreezes the rest.
    pub fn set_trainable(&self, trainable: impl Fn(&str) -> bool) {
        for (name, p) in &self.params {
            p.set_frozen(!trainable(name));
        }
    }

    pub fn unfreeze_all(&self) {
        self.set_trainable(|_| true);
    }

    pub fn trainable(&self) -> Vec<&Param> {
        self.params.values().filter(|p| !p.is_frozen()).collect()
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.trainable().into_iter().map(|p| p.var.clone()).collect()
    }

    /// Snapshot of all values, detached.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.var.as_tensor().detach()))
            .collect()
    }

    /// Raw little-endian bytes of one parameter; used for byte-identity checks.
    pub fn bytes_of(&self, name: &str) -> Result<Vec<u8>> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("no parameter `{name}`")))?;
        tensor_bytes(p.var.as_tensor())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let tensors: std::collections::HashMap<String, Tensor> = self.tensors().into_iter().collect();
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    /// Overwrites every registered parameter from `values`. Names and shapes
    /// must match exactly.
    pub fn load_values(&self, values: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint has {} tensors, model has {}",
                values.len(),
                self.params.len()
            )));
        }
        for (name, p) in &self.params {
            let v = values
                .get(name)
                .ok_or_else(|| Error::ShapeMismatch(format!("checkpoint lacks `{name}`")))?;
            if v.dims() != p.var.dims() {
                return Err(Error::ShapeMismatch(format!(
                    "`{name}`: checkpoint {:?} vs model {:?}",
                    v.dims(),
                    p.var.dims()
                )));
            }
            p.var.set(&v.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }
}

pub fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => flat
            .to_vec1::<f64>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        DType::F32 => flat
            .to_vec1::<f32>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        other => flat
            .to_dtype(DType::F64)
            .map_err(|_| Error::Config(format!("unsupported dtype {other:?}")))?
            .to_vec1::<f64>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
    })
}
