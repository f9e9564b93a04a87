//! Adam with decoupled weight decay and global-norm gradient clipping.

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Optimizer over a fixed, named parameter set. Moments are kept per name so
/// they can be checkpointed.
pub struct AdamW {
    params: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    cfg: AdamWConfig,
}

impl AdamW {
    pub fn new(params: Vec<(String, Var)>, cfg: AdamWConfig) -> Result<Self> {
        let m = params.iter().map(|(_, p)| p.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self { params, m, v, t: 0, cfg })
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Gradients of this optimizer's parameters; missing entries become zeros.
    pub fn gradients(&self, grads: &GradStore) -> Result<Vec<Tensor>> {
        self.params
            .iter()
            .map(|(_, p)| match grads.get(p.as_tensor()) {
                Some(g) => Ok(g.clone()),
                None => Ok(p.zeros_like()?),
            })
            .collect()
    }

    /// Applies one update with learning rate `lr` from the given gradients.
    pub fn step(&mut self, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), self.params.len())));
        }
        self.t += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, ((_, p), g)) in self.params.iter().zip(grads).enumerate() {
            let m = ((&self.m[i] * beta1)? + (g * (1.0 - beta1))?)?;
            let v = ((&self.v[i] * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + eps)?)?;
            let decayed = (p.as_tensor() * (1.0 - lr * weight_decay))?;
            p.set(&(decayed - (update * lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    /// Named first and second moments plus the step count.
    pub fn state(&self) -> (Vec<(String, Tensor, Tensor)>, u64) {
        let moments = self
            .params
            .iter()
            .zip(self.m.iter().zip(&self.v))
            .map(|((n, _), (m, v))| (n.clone(), m.clone(), v.clone()))
            .collect();
        (moments, self.t)
    }

    pub fn restore(&mut self, moments: Vec<(String, Tensor, Tensor)>, t: u64) -> Result<()> {
        if moments.len() != self.params.len() {
            return Err(Error::Checkpoint(format!("{} moment entries for {} parameters", moments.len(), self.params.len())));
        }
        for (i, (name, m, v)) in moments.into_iter().enumerate() {
            let (pn, p) = &self.params[i];
            if *pn != name || m.dims() != p.dims() || v.dims() != p.dims() {
                return Err(Error::Checkpoint(format!("optimizer state for `{name}` does not match `{pn}`")));
            }
            self.m[i] = m.to_dtype(p.dtype())?;
            self.v[i] = v.to_dtype(p.dtype())?;
        }
        self.t = t;
        Ok(())
    }
}

/// Global L2 norm of a gradient set.
pub fn global_norm(grads: &[Tensor]) -> Result<f64> {
    let mut total = 0.0;
    for g in grads {
        total += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
    }
    Ok(total.sqrt())
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads)?;
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        for g in grads.iter_mut() {
            *g = (&*g * scale)?;
        }
    }
    Ok(norm)
}
