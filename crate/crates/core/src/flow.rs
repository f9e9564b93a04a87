//! Conditional affine-coupling flow between the timbre-invariant prior domain
//! and the speaker-dependent latent domain.

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv1d, ConvSpec, ParamPath, WaveNet};
use crate::vae::check_mask;

#[derive(Debug, Clone)]
struct CouplingLayer {
    pre: Conv1d,
    net: WaveNet,
    post: Conv1d,
    half: usize,
    clamp: f64,
}

impl CouplingLayer {
    fn new(p: &mut ParamPath<'_>, cfg: &ModelConfig) -> Result<Self> {
        let half = cfg.d_latent / 2;
        Ok(Self {
            pre: Conv1d::new(&mut p.sub("pre"), half, cfg.flow_hidden, ConvSpec::pointwise())?,
            net: WaveNet::new(&mut p.sub("net"), cfg.flow_hidden, cfg.flow_kernel, 1, cfg.flow_wn_layers, Some(cfg.d_spk))?,
            post: Conv1d::zeroed(&mut p.sub("post"), cfg.flow_hidden, 2 * (cfg.d_latent - half), ConvSpec::pointwise())?,
            half,
            clamp: cfg.flow_log_scale_clamp,
        })
    }

    /// Returns the mapped sequence and the per-item log-determinant of the
    /// direction taken.
    fn apply(&self, x: &Tensor, mask: &Tensor, s: &Tensor, reverse: bool) -> Result<(Tensor, Tensor)> {
        let c = x.dims()[1];
        let x0 = x.narrow(1, 0, self.half)?;
        let x1 = x.narrow(1, self.half, c - self.half)?;
        let h = self.pre.forward(&x0)?.broadcast_mul(mask)?;
        let h = self.net.forward(&h, mask, Some(s))?;
        let stats = self.post.forward(&h)?.broadcast_mul(mask)?;
        let rest = c - self.half;
        let shift = stats.narrow(1, 0, rest)?;
        let log_scale = stats.narrow(1, rest, rest)?.clamp(-self.clamp, self.clamp)?;
        let (x1, logdet) = if reverse {
            let y = x1.sub(&shift)?.mul(&log_scale.neg()?.exp()?)?;
            (y, log_scale.sum((1, 2))?.neg()?)
        } else {
            let y = shift.add(&x1.mul(&log_scale.exp()?)?)?;
            (y, log_scale.sum((1, 2))?)
        };
        Ok((Tensor::cat(&[x0, x1], 1)?, logdet))
    }
}

fn flip_channels(x: &Tensor) -> Result<Tensor> {
    let c = x.dims()[1] as u32;
    let idx = Tensor::from_vec((0..c).rev().collect::<Vec<u32>>(), c as usize, x.device())?;
    Ok(x.index_select(&idx, 1)?)
}

/// Stack of affine coupling layers with a channel flip after each one.
#[derive(Debug, Clone)]
pub struct CouplingStack {
    layers: Vec<CouplingLayer>,
    d_latent: usize,
    d_spk: usize,
}

impl CouplingStack {
    pub fn new(p: &mut ParamPath<'_>, cfg: &ModelConfig) -> Result<Self> {
        if cfg.d_latent < 2 {
            return Err(Error::Config("flow needs at least two latent channels".into()));
        }
        let layers = (0..cfg.flow_layers)
            .map(|i| CouplingLayer::new(&mut p.sub(format!("layer.{i}")), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, d_latent: cfg.d_latent, d_spk: cfg.d_spk })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn check(&self, x: &Tensor, mask: &Tensor, s: &Tensor) -> Result<()> {
        check_mask(x, mask, "flow input")?;
        let (b, c, _) = x.dims3()?;
        if c != self.d_latent {
            return Err(Error::Shape(format!("flow expects {} channels, got {c}", self.d_latent)));
        }
        if s.dims() != [b, self.d_spk] {
            return Err(Error::Shape(format!("speaker embedding {:?} does not match [{b}, {}]", s.dims(), self.d_spk)));
        }
        Ok(())
    }

    /// Prior domain to latent domain; also returns the per-item log-determinant `[B]`.
    pub fn forward_with_logdet(&self, x: &Tensor, mask: &Tensor, s: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check(x, mask, s)?;
        let mut x = x.clone();
        let mut total = Tensor::zeros(x.dims()[0], x.dtype(), x.device())?;
        for layer in &self.layers {
            let (y, ld) = layer.apply(&x, mask, s, false)?;
            x = flip_channels(&y)?;
            total = (total + ld)?;
        }
        Ok((x, total))
    }

    /// Latent domain to prior domain; the log-determinant is that of the reverse map.
    pub fn reverse_with_logdet(&self, z: &Tensor, mask: &Tensor, s: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check(z, mask, s)?;
        let mut x = z.clone();
        let mut total = Tensor::zeros(x.dims()[0], x.dtype(), x.device())?;
        for layer in self.layers.iter().rev() {
            let (y, ld) = layer.apply(&flip_channels(&x)?, mask, s, true)?;
            x = y;
            total = (total + ld)?;
        }
        Ok((x, total))
    }

    pub fn forward(&self, x: &Tensor, mask: &Tensor, s: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_logdet(x, mask, s)?.0)
    }

    pub fn reverse(&self, z: &Tensor, mask: &Tensor, s: &Tensor) -> Result<Tensor> {
        Ok(self.reverse_with_logdet(z, mask, s)?.0)
    }

    pub fn log_det_forward(&self, x: &Tensor, mask: &Tensor, s: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_logdet(x, mask, s)?.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::batch::sequence_mask;
    use crate::nn::{host_normal, ParamStore};
    use crate::rng;
    use candle_core::{DType, Device};

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::toy(8);
        c.d_latent = 4;
        c.d_spk = 6;
        c.flow_hidden = 8;
        c
    }

    fn randomize(store: &ParamStore, seed: u64) {
        let mut r = rng::derive(seed, &[]);
        for (name, var) in store.iter() {
            let t = host_normal(&mut r, var.dims(), var.dtype(), var.device()).unwrap();
            store.set(name, &(t * 0.3).unwrap()).unwrap();
        }
    }

    fn build(dtype: DType, random: bool) -> (ParamStore, CouplingStack) {
        let mut store = ParamStore::new(11, dtype, &Device::Cpu);
        let flow = CouplingStack::new(&mut store.root().sub("flow"), &cfg()).unwrap();
        if random {
            randomize(&store, 5);
        }
        (store, flow)
    }

    fn normal(seed: u64, shape: &[usize], dtype: DType) -> Tensor {
        host_normal(&mut rng::derive(seed, &[]), shape, dtype, &Device::Cpu).unwrap()
    }

    fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn zero_init_is_identity() {
        let (_s, flow) = build(DType::F32, false);
        let x = normal(1, &[2, 4, 13], DType::F32);
        let m = Tensor::ones((2, 1, 13), DType::F32, &Device::Cpu).unwrap();
        let s = normal(2, &[2, 6], DType::F32);
        let (y, ld) = flow.forward_with_logdet(&x, &m, &s).unwrap();
        assert_eq!(max_abs(&y, &x), 0.0);
        assert_eq!(ld.to_vec1::<f32>().unwrap(), vec![0.0, 0.0]);
        assert_eq!(max_abs(&flow.reverse(&x, &m, &s).unwrap(), &x), 0.0);
    }

    #[test]
    fn round_trip_and_conditioning() {
        for (dtype, tol) in [(DType::F32, 1e-4), (DType::F64, 1e-9)] {
            let (_s, flow) = build(dtype, true);
            for trial in 0..100u64 {
                let t = 3 + (trial as usize * 7) % 20;
                let x = normal(100 + trial, &[1, 4, t], dtype);
                let m = Tensor::ones((1, 1, t), dtype, &Device::Cpu).unwrap();
                let s = normal(200 + trial, &[1, 6], dtype);
                let y = flow.forward(&x, &m, &s).unwrap();
                assert_eq!(y.dims(), x.dims());
                let back = flow.reverse(&y, &m, &s).unwrap();
                assert!(max_abs(&back, &x) < tol, "{dtype:?} trial {trial}");
                if trial < 5 {
                    let s2 = normal(300 + trial, &[1, 6], dtype);
                    assert!(max_abs(&flow.forward(&x, &m, &s2).unwrap(), &y) > 0.0);
                    assert!(max_abs(&flow.reverse(&y, &m, &s2).unwrap(), &x) > 1e-6);
                }
            }
        }
    }

    #[test]
    fn logdet_directions_cancel() {
        let (_s, flow) = build(DType::F64, true);
        let x = normal(7, &[3, 4, 9], DType::F64);
        let m = Tensor::ones((3, 1, 9), DType::F64, &Device::Cpu).unwrap();
        let s = normal(8, &[3, 6], DType::F64);
        let (y, fwd) = flow.forward_with_logdet(&x, &m, &s).unwrap();
        let (_, rev) = flow.reverse_with_logdet(&y, &m, &s).unwrap();
        for (a, b) in fwd.to_vec1::<f64>().unwrap().iter().zip(rev.to_vec1::<f64>().unwrap()) {
            assert!((a + b).abs() < 1e-9);
            assert!(a.abs() > 1e-6);
        }
    }

    #[test]
    fn constant_log_scale_counts_frames_and_channels() {
        let mut c = cfg();
        c.flow_layers = 1;
        let mut store = ParamStore::new(0, DType::F64, &Device::Cpu);
        let flow = CouplingStack::new(&mut store.root().sub("flow"), &c).unwrap();
        let scale = 0.37;
        store.set("flow.layer.0.post.bias", &Tensor::new(&[0.0, 0.0, scale, scale], &Device::Cpu).unwrap()).unwrap();
        let t = 11;
        let x = normal(3, &[1, 4, t], DType::F64);
        let m = Tensor::ones((1, 1, t), DType::F64, &Device::Cpu).unwrap();
        let s = normal(4, &[1, 6], DType::F64);
        let ld: f64 = flow.log_det_forward(&x, &m, &s).unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((ld - scale * t as f64 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn masked_frames_pass_through() {
        let (_s, flow) = build(DType::F64, true);
        let x = normal(9, &[2, 4, 10], DType::F64);
        let m = sequence_mask(&[10, 6], 10, DType::F64, &Device::Cpu).unwrap();
        let s = normal(10, &[2, 6], DType::F64);
        let (y, ld) = flow.forward_with_logdet(&x, &m, &s).unwrap();
        let tail_x = x.narrow(0, 1, 1).unwrap().narrow(2, 6, 4).unwrap();
        let tail_y = y.narrow(0, 1, 1).unwrap().narrow(2, 6, 4).unwrap();
        assert_eq!(max_abs(&tail_x, &tail_y), 0.0);
        let short = flow.log_det_forward(&x.narrow(0, 1, 1).unwrap().narrow(2, 0, 6).unwrap(), &Tensor::ones((1, 1, 6), DType::F64, &Device::Cpu).unwrap(), &s.narrow(0, 1, 1).unwrap()).unwrap();
        let a = ld.to_vec1::<f64>().unwrap()[1];
        let b = short.to_vec1::<f64>().unwrap()[0];
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn logdet_matches_numerical_jacobian() {
        let (_s, flow) = build(DType::F64, true);
        let (d, t) = (4, 2);
        let m = Tensor::ones((1, 1, t), DType::F64, &Device::Cpu).unwrap();
        let s = normal(12, &[1, 6], DType::F64);
        let x0: Vec<f64> = normal(13, &[d * t], DType::F64).to_vec1().unwrap();
        let eval = |v: &[f64]| -> Vec<f64> {
            let x = Tensor::from_vec(v.to_vec(), (1, d, t), &Device::Cpu).unwrap();
            flow.forward(&x, &m, &s).unwrap().flatten_all().unwrap().to_vec1().unwrap()
        };
        let n = d * t;
        let h = 1e-6;
        let mut jac = nalgebra::DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut plus = x0.clone();
            let mut minus = x0.clone();
            plus[j] += h;
            minus[j] -= h;
            let (fp, fm) = (eval(&plus), eval(&minus));
            for i in 0..n {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        let numeric = jac.determinant().abs().ln();
        let x = Tensor::from_vec(x0, (1, d, t), &Device::Cpu).unwrap();
        let analytic = flow.log_det_forward(&x, &m, &s).unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((numeric - analytic).abs() < 1e-3, "{numeric} vs {analytic}");
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let (_s, flow) = build(DType::F32, false);
        let m = Tensor::ones((1, 1, 5), DType::F32, &Device::Cpu).unwrap();
        let s = Tensor::zeros((1, 6), DType::F32, &Device::Cpu).unwrap();
        let bad = Tensor::zeros((1, 5, 5), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(flow.forward(&bad, &m, &s), Err(Error::Shape(_))));
        let x = Tensor::zeros((1, 4, 5), DType::F32, &Device::Cpu).unwrap();
        assert!(flow.reverse(&x, &m, &Tensor::zeros((1, 7), DType::F32, &Device::Cpu).unwrap()).is_err());
    }
}
