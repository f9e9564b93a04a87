//! Adversarial disentanglement: the phoneme-leakage discriminator over
//! speaker-embedding pairs, the timbre-residual discriminator over latent
//! sequences, their least-squares losses, and gradient reversal.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, AttentiveStatsPool, Conv1d, ConvSpec, Linear, ParamPath, Res2Block};
use crate::vae::check_mask;

const LEAKY_SLOPE: f64 = 0.2;

/// Feedforward scorer over concatenated embedding pairs `[B, 2·d_spk] -> [B]`.
#[derive(Debug, Clone)]
pub struct LeakageDiscriminator {
    layers: [Linear; 3],
}

impl LeakageDiscriminator {
    pub fn new(p: &mut ParamPath<'_>, cfg: &ModelConfig) -> Result<Self> {
        let hidden = 4 * cfg.d_spk;
        Ok(Self {
            layers: [
                Linear::new(&mut p.sub("fc1"), 2 * cfg.d_spk, hidden)?,
                Linear::new(&mut p.sub("fc2"), hidden, hidden)?,
                Linear::new(&mut p.sub("fc3"), hidden, 1)?,
            ],
        })
    }

    pub fn forward(&self, pair: &Tensor) -> Result<Tensor> {
        let h = leaky_relu(&self.layers[0].forward(pair)?, LEAKY_SLOPE)?;
        let h = leaky_relu(&self.layers[1].forward(&h)?, LEAKY_SLOPE)?;
        Ok(self.layers[2].forward(&h)?.squeeze(1)?)
    }

    /// Copy whose weights are detached from the graph: gradients still reach
    /// the input but never the discriminator's own parameters.
    pub fn frozen(&self) -> Self {
        Self { layers: self.layers.clone().map(|l| l.frozen()) }
    }
}

/// Res2 frame encoder, attentive statistics pooling and a linear head:
/// `[B, d_latent, T] -> [B]`.
#[derive(Debug, Clone)]
pub struct TimbreResidualDiscriminator {
    pre: Conv1d,
    blocks: Vec<Res2Block>,
    pool: AttentiveStatsPool,
    head: Linear,
}

impl TimbreResidualDiscriminator {
    pub fn new(p: &mut ParamPath<'_>, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.dt_channels;
        let blocks = (0..cfg.dt_blocks)
            .map(|i| Res2Block::new(&mut p.sub(format!("block.{i}")), c, cfg.dt_scale, 3, i + 1, false))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            pre: Conv1d::new(&mut p.sub("pre"), cfg.d_latent, c, ConvSpec::pointwise())?,
            blocks,
            pool: AttentiveStatsPool::new(&mut p.sub("pool"), c, cfg.dt_attention)?,
            head: Linear::new(&mut p.sub("head"), 2 * c, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        check_mask(x, mask, "timbre discriminator input")?;
        let mut h = leaky_relu(&self.pre.forward(x)?, LEAKY_SLOPE)?.broadcast_mul(mask)?;
        for block in &self.blocks {
            h = block.forward(&h, mask)?;
        }
        Ok(self.head.forward(&self.pool.forward(&h, mask)?)?.squeeze(1)?)
    }
}

/// Identity on the forward pass; scales the incoming gradient by `-lambda`.
#[derive(Debug, Clone, Copy)]
pub struct GradientReversal {
    lambda: f64,
}

impl GradientReversal {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("reversal weight must be finite and non-negative, got {lambda}")));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.contiguous()?.apply_op1(*self)?)
    }
}

fn copy_contiguous<T: Copy>(v: &[T], layout: &Layout) -> candle_core::Result<Vec<T>> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(v[start..end].to_vec()),
        None => candle_core::bail!("gradient reversal expects a contiguous input"),
    }
}

impl CustomOp1 for GradientReversal {
    fn name(&self) -> &'static str {
        "gradient-reversal"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(copy_contiguous(v, layout)?),
            CpuStorage::F64(v) => CpuStorage::F64(copy_contiguous(v, layout)?),
            _ => candle_core::bail!("gradient reversal supports only f32 and f64"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.affine(-self.lambda, 0.0)?))
    }
}

/// Discriminator side of the leakage game: contrast pairs toward 1, overlap pairs toward 0.
pub fn leakage_discriminator_loss(d_contrast: &Tensor, d_overlap: &Tensor) -> Result<Tensor> {
    Ok((d_contrast.affine(1.0, -1.0)?.sqr()?.mean_all()? + d_overlap.sqr()?.mean_all()?)?)
}

/// Speaker-encoder side: push overlap pairs toward 1, weighted by `lambda_se`.
pub fn speaker_encoder_adversarial_loss(d_overlap: &Tensor, lambda_se: f64) -> Result<Tensor> {
    Ok((d_overlap.affine(1.0, -1.0)?.sqr()?.mean_all()? * lambda_se)?)
}

/// Prior samples toward 1, inverse-transformed latents toward 0.
pub fn timbre_residual_loss(d_m: &Tensor, d_rev: &Tensor) -> Result<Tensor> {
    Ok((d_m.affine(1.0, -1.0)?.sqr()?.mean_all()? + d_rev.sqr()?.mean_all()?)?)
}
