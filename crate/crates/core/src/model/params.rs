use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{CtError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
}

/// Seed for one named tensor: every parameter gets its own stream so that
/// re-initializing a subset reproduces exactly what a fresh model holds.
fn param_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, folded into the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    crate::data::derive_seed(seed, h)
}

pub fn init_values(name: &str, numel: usize, init: Init, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, name));
    match init {
        Init::Zeros => vec![0.0; numel],
        Init::Ones => vec![1.0; numel],
        Init::Normal(std) => {
            let d = Normal::new(0.0, std).expect("valid std");
            (0..numel).map(|_| d.sample(&mut rng)).collect()
        }
        Init::Uniform(bound) => {
            let d = Uniform::new_inclusive(-bound, bound).expect("valid bound");
            (0..numel).map(|_| d.sample(&mut rng)).collect()
        }
    }
}

/// Named trainable tensors in a deterministic (sorted) order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
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

    pub fn init(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) -> Result<()> {
        let numel = shape.iter().product();
        let vals = init_values(name, numel, init, seed);
        self.insert_values(name, shape, vals)
    }

    pub fn insert_values(&mut self, name: &str, shape: &[usize], vals: Vec<f64>) -> Result<()> {
        let t = Tensor::from_vec(vals, shape, &self.device)?.to_dtype(self.dtype)?;
        self.vars.insert(name.to_string(), Var::from_tensor(&t)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| CtError::Config(format!("missing parameter `{name}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        Ok(self.get(name)?.as_tensor().clone())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.vars.keys().any(|k| k.starts_with(prefix))
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.vars.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn vars_where(&self, pred: impl Fn(&str) -> bool) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.vars
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Flattened values of one parameter as f64.
    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self
            .tensor(name)?
            .flatten_all()?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?)
    }

    pub fn set_values(&self, name: &str, vals: &[f64]) -> Result<()> {
        let var = self.get(name)?;
        let t = Tensor::from_slice(vals, var.shape(), &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    /// Copy with independent storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = Self::new(self.dtype, self.device.clone());
        for (k, v) in &self.vars {
            let t = v.as_tensor().copy()?;
            out.vars.insert(k.clone(), Var::from_tensor(&t)?);
        }
        Ok(out)
    }

    /// Same values converted to another dtype.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut out = Self::new(dtype, self.device.clone());
        for (k, v) in &self.vars {
            let t = v.as_tensor().to_dtype(dtype)?;
            out.vars.insert(k.clone(), Var::from_tensor(&t)?);
        }
        Ok(out)
    }

    /// SHA-256 over names, shapes and f32 values of matching parameters.
    pub fn hash_where(&self, pred: impl Fn(&str) -> bool) -> Result<String> {
        let mut h = Sha256::new();
        for (k, v) in self.vars.iter().filter(|(k, _)| pred(k)) {
            h.update(k.as_bytes());
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let vals = v.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            for x in vals {
                h.update(x.to_le_bytes());
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}
