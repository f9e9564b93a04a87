//! Named, seeded parameter storage.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in ±bound.
    Uniform(f64),
    Normal(f64),
}

/// All trainable tensors of a model, keyed by dotted module path.
///
/// Initial values are a function of `(seed, name)` only, so adding a module
/// does not perturb the initialisation of the others.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self { vars: BTreeMap::new(), seed, dtype, device: device.clone() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> ParamPath<'_> {
        ParamPath { store: self, prefix: String::new() }
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Vars whose name starts with any of `prefixes`, in name order.
    pub fn select(&self, prefixes: &[&str]) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Overwrites a parameter in place (shape must match).
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self.vars.get(name).ok_or_else(|| Error::InvalidArgument(format!("no parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::Shape(format!("parameter `{name}` is {:?}, got {:?}", var.dims(), value.dims())));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Zeroes every parameter whose name starts with `prefix`.
    pub fn zero(&self, prefix: &str) -> Result<()> {
        for (name, var) in self.vars.iter().filter(|(k, _)| k.starts_with(prefix)) {
            var.set(&var.zeros_like()?)
                .map_err(|e| Error::InvalidArgument(format!("zeroing `{name}`: {e}")))?;
        }
        Ok(())
    }

    fn init(&mut self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(&name) {
            if v.dims() != shape {
                return Err(Error::Shape(format!("parameter `{name}` registered twice with different shapes")));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let mut r = rng::derive(self.seed, &[tag::INIT, rng::hash_name(&name)]);
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| r.random_range(-b..=b)).collect(),
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    z * std
                })
                .collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }
}

/// Cursor into a [`ParamStore`] under a dotted prefix.
pub struct ParamPath<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl ParamPath<'_> {
    pub fn sub(&mut self, name: impl std::fmt::Display) -> ParamPath<'_> {
        let prefix =
            if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        ParamPath { store: self.store, prefix }
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        self.store.init(full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_only_on_seed_and_name() {
        let mut a = ParamStore::new(3, DType::F32, &Device::Cpu);
        let mut b = ParamStore::new(3, DType::F32, &Device::Cpu);
        let wa = a.root().sub("enc").get("w", &[4, 3], Init::Normal(1.0)).unwrap();
        b.root().sub("other").get("w", &[2], Init::Normal(1.0)).unwrap();
        let wb = b.root().sub("enc").get("w", &[4, 3], Init::Normal(1.0)).unwrap();
        let va: Vec<Vec<f32>> = wa.to_vec2().unwrap();
        let vb: Vec<Vec<f32>> = wb.to_vec2().unwrap();
        assert_eq!(va, vb);
        assert_eq!(a.select(&["enc."]).len(), 1);
    }

    #[test]
    fn set_updates_shared_tensor() {
        let mut s = ParamStore::new(0, DType::F64, &Device::Cpu);
        let t = s.root().get("x", &[2], Init::Ones).unwrap();
        s.set("x", &Tensor::new(&[5.0f64, 6.0], &Device::Cpu).unwrap()).unwrap();
        assert_eq!(t.to_vec1::<f64>().unwrap(), vec![5.0, 6.0]);
        assert!(s.set("x", &Tensor::new(&[1.0f64], &Device::Cpu).unwrap()).is_err());
    }
}
