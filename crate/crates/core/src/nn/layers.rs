//! Basic differentiable layers over `[batch, channels, time]` tensors.

use candle_core::{DType, Tensor, D};

use super::params::{Init, ParamPath};
use crate::error::{Error, Result};

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// Softmax over the last dimension; positions where `mask == 0` get exactly
/// zero weight. `mask` broadcasts against `x`.
pub fn masked_softmax(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let mask = mask.broadcast_as(x.shape())?;
    let neg = ((mask.ones_like()? - &mask)? * -1e9)?;
    let x = (x.broadcast_mul(&mask)? + neg)?;
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?.broadcast_mul(&mask)?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

/// Mean over time of `[B, C, T]` restricted to `mask` (`[B, 1, T]`).
pub fn masked_mean(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let num = x.broadcast_mul(mask)?.sum_keepdim(2)?;
    let den = mask.sum_keepdim(2)?.clamp(1.0, f64::INFINITY)?;
    Ok(num.broadcast_div(&den)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(p: &mut ParamPath<'_>, input: usize, output: usize) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        Ok(Self {
            weight: p.get("weight", &[output, input], Init::Uniform(bound))?,
            bias: p.get("bias", &[output], Init::Uniform(bound))?,
        })
    }

    pub fn with_init(p: &mut ParamPath<'_>, input: usize, output: usize, init: Init) -> Result<Self> {
        Ok(Self { weight: p.get("weight", &[output, input], init)?, bias: p.get("bias", &[output], init)? })
    }

    /// `[.., input] -> [.., output]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }

    /// Copy with gradient-detached weights: gradients still reach the
    /// input but never the parameters.
    pub fn frozen(&self) -> Self {
        Self { weight: self.weight.detach(), bias: self.bias.detach() }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Length-preserving ("same") convolution for odd kernels.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self { kernel, dilation, stride: 1, padding: dilation * (kernel - 1) / 2 }
    }

    pub fn pointwise() -> Self {
        Self::same(1, 1)
    }
}

/// Stride-1 convolution as shifted views stacked along channels and one
/// matrix product, so both directions of autodiff reduce to matmuls.
pub fn conv1d_unit_stride(x: &Tensor, weight: &Tensor, padding: usize, dilation: usize) -> Result<Tensor> {
    let (o, c, k) = weight.dims3()?;
    let (_, xc, t) = x.dims3()?;
    if xc != c {
        return Err(Error::Shape(format!("conv expects {c} input channels, got {xc}")));
    }
    let span = dilation * (k - 1);
    if t + 2 * padding <= span {
        return Err(Error::Shape(format!("input of {t} frames is shorter than the kernel span")));
    }
    let l_out = t + 2 * padding - span;
    if k == 1 && padding == 0 {
        return Ok(weight.reshape((o, c))?.broadcast_matmul(x)?);
    }
    let xp = if padding > 0 { x.pad_with_zeros(2, padding, padding)? } else { x.clone() };
    let cols = (0..k).map(|j| xp.narrow(2, j * dilation, l_out)).collect::<candle_core::Result<Vec<_>>>()?;
    let cols = Tensor::cat(&cols, 1)?;
    let w = weight.transpose(1, 2)?.reshape((o, k * c))?;
    Ok(w.broadcast_matmul(&cols)?)
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: Tensor,
    bias: Tensor,
    spec: ConvSpec,
}

impl Conv1d {
    pub fn new(p: &mut ParamPath<'_>, input: usize, output: usize, spec: ConvSpec) -> Result<Self> {
        let bound = 1.0 / ((input * spec.kernel) as f64).sqrt();
        Self::with_init(p, input, output, spec, Init::Uniform(bound), Init::Uniform(bound))
    }

    pub fn with_init(
        p: &mut ParamPath<'_>,
        input: usize,
        output: usize,
        spec: ConvSpec,
        weight_init: Init,
        bias_init: Init,
    ) -> Result<Self> {
        Ok(Self {
            weight: p.get("weight", &[output, input, spec.kernel], weight_init)?,
            bias: p.get("bias", &[output], bias_init)?,
            spec,
        })
    }

    pub fn zeroed(p: &mut ParamPath<'_>, input: usize, output: usize, spec: ConvSpec) -> Result<Self> {
        Self::with_init(p, input, output, spec, Init::Zeros, Init::Zeros)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = if self.spec.stride == 1 {
            conv1d_unit_stride(x, &self.weight, self.spec.padding, self.spec.dilation)?
        } else {
            x.conv1d(&self.weight, self.spec.padding, self.spec.stride, self.spec.dilation, 1)?
        };
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1))?)?)
    }
}

/// Layer normalisation over the channel axis of `[B, C, T]`.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl ChannelNorm {
    pub fn new(p: &mut ParamPath<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: p.get("gamma", &[channels], Init::Ones)?,
            beta: p.get("beta", &[channels], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn
            .broadcast_mul(&self.gamma.reshape((1, (), 1))?)?
            .broadcast_add(&self.beta.reshape((1, (), 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    table: Tensor,
    dim: usize,
}

impl Embedding {
    pub fn new(p: &mut ParamPath<'_>, vocab: usize, dim: usize) -> Result<Self> {
        Ok(Self { table: p.get("table", &[vocab, dim], Init::Normal((dim as f64).powf(-0.5)))?, dim })
    }

    pub fn vocab_size(&self) -> usize {
        self.table.dims()[0]
    }

    /// `ids [B, N]` (u32) -> `[B, N, dim]`.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, n) = ids.dims2()?;
        Ok(self.table.index_select(&ids.flatten_all()?, 0)?.reshape((b, n, self.dim))?)
    }
}

/// Learned transposed-convolution upsampler in polyphase form: a stride-1
/// convolution emits `factor` output phases per input step, which are then
/// interleaved. Output length is exactly `factor × input length`.
#[derive(Debug, Clone)]
pub struct Upsample {
    conv: Conv1d,
    factor: usize,
    out_channels: usize,
}

impl Upsample {
    pub fn new(p: &mut ParamPath<'_>, input: usize, output: usize, factor: usize, kernel: usize) -> Result<Self> {
        let conv = Conv1d::new(&mut p.sub("conv"), input, output * factor, ConvSpec::same(kernel, 1))?;
        Ok(Self { conv, factor, out_channels: output })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, t) = x.dims3()?;
        let y = self.conv.forward(x)?; // [B, out*factor, T]
        let y = y.reshape((b, self.out_channels, self.factor, t))?.transpose(2, 3)?;
        Ok(y.contiguous()?.reshape((b, self.out_channels, t * self.factor))?)
    }
}

/// Gated dilated-convolution residual stack with optional global
/// conditioning (WaveNet-style).
#[derive(Debug, Clone)]
pub struct WaveNet {
    in_layers: Vec<Conv1d>,
    res_skip: Vec<Conv1d>,
    cond: Option<Conv1d>,
    hidden: usize,
}

impl WaveNet {
    pub fn new(
        p: &mut ParamPath<'_>,
        hidden: usize,
        kernel: usize,
        dilation_rate: usize,
        layers: usize,
        cond_channels: Option<usize>,
    ) -> Result<Self> {
        let mut in_layers = Vec::with_capacity(layers);
        let mut res_skip = Vec::with_capacity(layers);
        for i in 0..layers {
            let dilation = dilation_rate.pow(i as u32);
            in_layers.push(Conv1d::new(&mut p.sub(format!("in.{i}")), hidden, 2 * hidden, ConvSpec::same(kernel, dilation))?);
            let out = if i + 1 < layers { 2 * hidden } else { hidden };
            res_skip.push(Conv1d::new(&mut p.sub(format!("res_skip.{i}")), hidden, out, ConvSpec::pointwise())?);
        }
        let cond = match cond_channels {
            Some(c) => Some(Conv1d::new(&mut p.sub("cond"), c, 2 * hidden * layers, ConvSpec::pointwise())?),
            None => None,
        };
        Ok(Self { in_layers, res_skip, cond, hidden })
    }

    /// `x [B, H, T]`, `mask [B, 1, T]`, `g [B, G]` global conditioning.
    pub fn forward(&self, x: &Tensor, mask: &Tensor, g: Option<&Tensor>) -> Result<Tensor> {
        let h = self.hidden;
        let g_all = match (&self.cond, g) {
            (Some(cond), Some(g)) => Some(cond.forward(&g.unsqueeze(2)?)?),
            _ => None,
        };
        let mut x = x.clone();
        let mut output: Option<Tensor> = None;
        let n = self.in_layers.len();
        for i in 0..n {
            let mut x_in = self.in_layers[i].forward(&x)?;
            if let Some(g_all) = &g_all {
                x_in = x_in.broadcast_add(&g_all.narrow(1, 2 * h * i, 2 * h)?)?;
            }
            let acts = (x_in.narrow(1, 0, h)?.tanh()? * sigmoid(&x_in.narrow(1, h, h)?)?)?;
            let rs = self.res_skip[i].forward(&acts)?;
            let skip = if i + 1 < n {
                x = (x + rs.narrow(1, 0, h)?)?.broadcast_mul(mask)?;
                rs.narrow(1, h, h)?
            } else {
                rs
            };
            output = Some(match output {
                Some(o) => (o + skip)?,
                None => skip,
            });
        }
        Ok(output.expect("at least one layer").broadcast_mul(mask)?)
    }
}

/// Multi-scale residual block: channels split into `scale` groups, each group
/// convolved after adding the previous group's output. Optional
/// squeeze-excitation on the result.
#[derive(Debug, Clone)]
pub struct Res2Block {
    pre: Conv1d,
    convs: Vec<Conv1d>,
    post: Conv1d,
    se: Option<(Linear, Linear)>,
    scale: usize,
    width: usize,
}

impl Res2Block {
    pub fn new(
        p: &mut ParamPath<'_>,
        channels: usize,
        scale: usize,
        kernel: usize,
        dilation: usize,
        squeeze_excite: bool,
    ) -> Result<Self> {
        assert!(scale >= 2 && channels % scale == 0, "channels must divide into res2 groups");
        let width = channels / scale;
        let pre = Conv1d::new(&mut p.sub("pre"), channels, channels, ConvSpec::pointwise())?;
        let convs = (1..scale)
            .map(|i| Conv1d::new(&mut p.sub(format!("group.{i}")), width, width, ConvSpec::same(kernel, dilation)))
            .collect::<Result<Vec<_>>>()?;
        let post = Conv1d::new(&mut p.sub("post"), channels, channels, ConvSpec::pointwise())?;
        let se = if squeeze_excite {
            let bottleneck = (channels / 4).max(1);
            Some((
                Linear::new(&mut p.sub("se.down"), channels, bottleneck)?,
                Linear::new(&mut p.sub("se.up"), bottleneck, channels)?,
            ))
        } else {
            None
        };
        Ok(Self { pre, convs, post, se, scale, width })
    }

    pub fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let h = self.pre.forward(x)?.relu()?.broadcast_mul(mask)?;
        let mut outs = Vec::with_capacity(self.scale);
        outs.push(h.narrow(1, 0, self.width)?);
        let mut prev: Option<Tensor> = None;
        for (i, conv) in self.convs.iter().enumerate() {
            let xi = h.narrow(1, (i + 1) * self.width, self.width)?;
            let inp = match &prev {
                Some(p) => (xi + p)?,
                None => xi,
            };
            let yi = conv.forward(&inp)?.relu()?.broadcast_mul(mask)?;
            outs.push(yi.clone());
            prev = Some(yi);
        }
        let h = Tensor::cat(&outs, 1)?;
        let mut h = self.post.forward(&h)?.relu()?.broadcast_mul(mask)?;
        if let Some((down, up)) = &self.se {
            let s = masked_mean(&h, mask)?.squeeze(2)?;
            let s = sigmoid(&up.forward(&down.forward(&s)?.relu()?)?)?;
            h = h.broadcast_mul(&s.unsqueeze(2)?)?;
        }
        Ok((h + x)?.broadcast_mul(mask)?)
    }
}

const POOL_VAR_FLOOR: f64 = 1e-12;

/// Attentive statistics pooling with global context: `[B, C, T] -> [B, 2C]`
/// (attention-weighted mean, then standard deviation).
#[derive(Debug, Clone)]
pub struct AttentiveStatsPool {
    attend: Conv1d,
    score: Conv1d,
}

impl AttentiveStatsPool {
    pub fn new(p: &mut ParamPath<'_>, channels: usize, attention: usize) -> Result<Self> {
        Ok(Self {
            attend: Conv1d::new(&mut p.sub("attend"), 3 * channels, attention, ConvSpec::pointwise())?,
            score: Conv1d::new(&mut p.sub("score"), attention, channels, ConvSpec::pointwise())?,
        })
    }

    fn stats(x: &Tensor, weights: &Tensor) -> Result<(Tensor, Tensor)> {
        let mean = x.broadcast_mul(weights)?.sum_keepdim(2)?;
        let var = x.broadcast_sub(&mean)?.sqr()?.broadcast_mul(weights)?.sum_keepdim(2)?;
        let std = var.clamp(POOL_VAR_FLOOR, f64::INFINITY)?.sqrt()?;
        Ok((mean, std))
    }

    pub fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (_, c, t) = x.dims3()?;
        let count = mask.sum_keepdim(2)?.clamp(1.0, f64::INFINITY)?;
        let uniform = mask.broadcast_div(&count)?;
        let (gm, gs) = Self::stats(x, &uniform)?;
        let ctx = Tensor::cat(&[x.clone(), gm.broadcast_as((x.dims()[0], c, t))?, gs.broadcast_as((x.dims()[0], c, t))?], 1)?;
        let a = self.attend.forward(&ctx)?.tanh()?;
        let logits = self.score.forward(&a)?;
        let w = masked_softmax(&logits, mask)?;
        let (mean, std) = Self::stats(x, &w)?;
        Ok(Tensor::cat(&[mean.squeeze(2)?, std.squeeze(2)?], 1)?)
    }
}

/// Standard-normal noise drawn on the host from `rng`, so draws are
/// reproducible and independent of the tensor backend.
pub fn host_normal<R: rand::Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    dtype: DType,
    device: &candle_core::Device,
) -> Result<Tensor> {
    use rand_distr::{Distribution, StandardNormal};
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_gradient_stays_finite_in_saturation() {
        let x = candle_core::Var::from_vec(vec![-200f32, -20.0, 0.0, 20.0, 200.0], 5, &Device::Cpu).unwrap();
        let y = sigmoid(x.as_tensor()).unwrap();
        let v = y.to_vec1::<f32>().unwrap();
        assert!((v[2] - 0.5).abs() < 1e-7 && v[0] < 1e-8 && v[4] > 1.0 - 1e-7, "{v:?}");
        let g = y.sum_all().unwrap().backward().unwrap();
        let g = g.get(x.as_tensor()).unwrap().to_vec1::<f32>().unwrap();
        assert!(g.iter().all(|v| v.is_finite()), "{g:?}");
        assert!((g[2] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn unit_stride_conv_matches_reference() {
        let dev = candle_core::Device::Cpu;
        for (c, o, k, d, p, t) in [(3, 5, 1, 1, 0, 7), (3, 4, 3, 1, 1, 9), (2, 6, 5, 3, 6, 20), (4, 2, 3, 2, 0, 11)] {
            let x = candle_core::Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, c, t), &dev).unwrap()).unwrap();
            let w = candle_core::Var::from_tensor(&Tensor::randn(0f64, 1.0, (o, c, k), &dev).unwrap()).unwrap();
            let a = conv1d_unit_stride(x.as_tensor(), w.as_tensor(), p, d).unwrap();
            let b = x.as_tensor().conv1d(w.as_tensor(), p, 1, d, 1).unwrap();
            assert_eq!(a.dims(), b.dims());
            let diff = (&a - &b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(diff < 1e-10);
            let grads = a.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            let loss = |xv: &[f64], wv: &[f64]| {
                let xt = Tensor::from_vec(xv.to_vec(), (2, c, t), &dev).unwrap();
                let wt = Tensor::from_vec(wv.to_vec(), (o, c, k), &dev).unwrap();
                conv1d_unit_stride(&xt, &wt, p, d).unwrap().sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
            };
            let x0: Vec<f64> = x.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            let w0: Vec<f64> = w.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            let h = 1e-6;
            for (var, is_x) in [(&x, true), (&w, false)] {
                let g: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
                for i in [0, g.len() / 2, g.len() - 1] {
                    let (mut xp, mut wp) = (x0.clone(), w0.clone());
                    let (mut xm, mut wm) = (x0.clone(), w0.clone());
                    if is_x {
                        xp[i] += h;
                        xm[i] -= h;
                    } else {
                        wp[i] += h;
                        wm[i] -= h;
                    }
                    let numeric = (loss(&xp, &wp) - loss(&xm, &wm)) / (2.0 * h);
                    assert!((numeric - g[i]).abs() < 1e-4 * (1.0 + numeric.abs()), "{numeric} vs {}", g[i]);
                }
            }
        }
    }

    use crate::nn::params::ParamStore;
    use candle_core::Device;

    fn store() -> ParamStore {
        ParamStore::new(11, DType::F64, &Device::Cpu)
    }

    #[test]
    fn masked_softmax_zeroes_padding() {
        let x = Tensor::new(&[[[1.0f64, 2.0, 3.0, 50.0]]], &Device::Cpu).unwrap();
        let m = Tensor::new(&[[[1.0f64, 1.0, 1.0, 0.0]]], &Device::Cpu).unwrap();
        let w: Vec<f64> = masked_softmax(&x, &m).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(w[3], 0.0);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w[2] > w[1] && w[1] > w[0]);
    }

    #[test]
    fn upsample_multiplies_length() {
        let mut s = store();
        let up = Upsample::new(&mut s.root().sub("up"), 3, 2, 8, 3).unwrap();
        let x = Tensor::ones((2, 3, 5), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(up.forward(&x).unwrap().dims(), &[2, 2, 40]);
    }

    #[test]
    fn upsample_interleaves_phases() {
        // With a pointwise kernel output[t*f + r] is phase r of input step t.
        let mut s = store();
        let up = Upsample::new(&mut s.root().sub("up"), 1, 1, 2, 1).unwrap();
        s.set("up.conv.weight", &Tensor::new(&[[[1.0f64]], [[10.0]]], &Device::Cpu).unwrap()).unwrap();
        s.zero("up.conv.bias").unwrap();
        let x = Tensor::new(&[[[1.0f64, 2.0, 3.0]]], &Device::Cpu).unwrap();
        let y: Vec<f64> = up.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(y, vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0]);
    }

    #[test]
    fn pooling_is_length_agnostic_and_mask_exact() {
        let mut s = store();
        let pool = AttentiveStatsPool::new(&mut s.root().sub("pool"), 4, 8).unwrap();
        for t in [1usize, 5, 50] {
            let x = Tensor::randn(0.0f64, 1.0, (2, 4, t), &Device::Cpu).unwrap();
            let m = Tensor::ones((2, 1, t), DType::F64, &Device::Cpu).unwrap();
            assert_eq!(pool.forward(&x, &m).unwrap().dims(), &[2, 8]);
        }
        // padding with garbage under a zero mask changes nothing
        let x = Tensor::randn(0.0f64, 1.0, (1, 4, 6), &Device::Cpu).unwrap();
        let m = Tensor::ones((1, 1, 6), DType::F64, &Device::Cpu).unwrap();
        let a = pool.forward(&x, &m).unwrap();
        let junk = (Tensor::randn(0.0f64, 1.0, (1, 4, 3), &Device::Cpu).unwrap() * 100.0).unwrap();
        let xp = Tensor::cat(&[x, junk], 2).unwrap();
        let mp = Tensor::cat(&[m, Tensor::zeros((1, 1, 3), DType::F64, &Device::Cpu).unwrap()], 2).unwrap();
        let b = pool.forward(&xp, &mp).unwrap();
        let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-12, "{d}");
    }

    #[test]
    fn constant_input_has_zero_pooled_deviation() {
        let mut s = store();
        let pool = AttentiveStatsPool::new(&mut s.root().sub("pool"), 3, 4).unwrap();
        let x = Tensor::new(&[[0.7f64], [-1.2], [3.0]], &Device::Cpu).unwrap().unsqueeze(0).unwrap();
        let x = x.broadcast_as((1, 3, 20)).unwrap().contiguous().unwrap();
        let m = Tensor::ones((1, 1, 20), DType::F64, &Device::Cpu).unwrap();
        let v: Vec<f64> = pool.forward(&x, &m).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!((v[0] - 0.7).abs() < 1e-12 && (v[1] + 1.2).abs() < 1e-12 && (v[2] - 3.0).abs() < 1e-12);
        assert!(v[3..].iter().all(|&s| s <= POOL_VAR_FLOOR.sqrt() * 1.0001), "{v:?}");
    }

    #[test]
    fn wavenet_respects_mask() {
        let mut s = store();
        let wn = WaveNet::new(&mut s.root().sub("wn"), 4, 3, 2, 3, Some(2)).unwrap();
        let x = Tensor::randn(0.0f64, 1.0, (1, 4, 10), &Device::Cpu).unwrap();
        let mask = Tensor::new(&[[[1.0f64, 1., 1., 1., 1., 1., 1., 0., 0., 0.]]], &Device::Cpu).unwrap();
        let g = Tensor::randn(0.0f64, 1.0, (1, 2), &Device::Cpu).unwrap();
        let y = wn.forward(&x.broadcast_mul(&mask).unwrap(), &mask, Some(&g)).unwrap();
        let tail: Vec<f64> = y.narrow(2, 7, 3).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(tail.iter().all(|&v| v == 0.0));
    }
}
