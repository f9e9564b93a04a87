//! Deterministic log-domain duration regressor conditioned on the speaker
//! embedding, and its loss.

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{ChannelNorm, Conv1d, ConvSpec, ParamPath};

#[derive(Debug, Clone)]
pub struct DurationPredictor {
    cond: Conv1d,
    conv1: Conv1d,
    norm1: ChannelNorm,
    conv2: Conv1d,
    norm2: ChannelNorm,
    proj: Conv1d,
}

impl DurationPredictor {
    pub fn new(p: &mut ParamPath<'_>, cfg: &ModelConfig) -> Result<Self> {
        let (h, f, k) = (cfg.text_hidden, cfg.duration_filters, cfg.duration_kernel);
        Ok(Self {
            cond: Conv1d::new(&mut p.sub("cond"), cfg.d_spk, h, ConvSpec::pointwise())?,
            conv1: Conv1d::new(&mut p.sub("conv1"), h, f, ConvSpec::same(k, 1))?,
            norm1: ChannelNorm::new(&mut p.sub("norm1"), f)?,
            conv2: Conv1d::new(&mut p.sub("conv2"), f, f, ConvSpec::same(k, 1))?,
            norm2: ChannelNorm::new(&mut p.sub("norm2"), f)?,
            proj: Conv1d::new(&mut p.sub("proj"), f, 1, ConvSpec::pointwise())?,
        })
    }

    /// Log-durations `[B, 1, N]` from phoneme hidden states `[B, H, N]` and
    /// speaker embeddings `[B, d_spk]`.
    pub fn forward(&self, hidden: &Tensor, mask: &Tensor, speaker: &Tensor) -> Result<Tensor> {
        let x = hidden.broadcast_add(&self.cond.forward(&speaker.unsqueeze(2)?)?)?;
        let x = self.norm1.forward(&self.conv1.forward(&x.broadcast_mul(mask)?)?.relu()?)?;
        let x = self.norm2.forward(&self.conv2.forward(&x.broadcast_mul(mask)?)?.relu()?)?;
        Ok(self.proj.forward(&x.broadcast_mul(mask)?)?.broadcast_mul(mask)?)
    }

    /// Strictly positive durations (in frames), `exp` of the log output.
    pub fn predict(&self, hidden: &Tensor, mask: &Tensor, speaker: &Tensor) -> Result<Tensor> {
        Ok(self.forward(hidden, mask, speaker)?.exp()?.broadcast_mul(mask)?)
    }
}

/// Integer frame counts for inference: `max(1, round(pace * d))`.
pub fn round_durations(predicted: &[f64], pace: f64) -> Vec<usize> {
    predicted.iter().map(|&d| ((d * pace).round() as usize).max(1)).collect()
}

/// Masked mean squared error between predicted log-durations `[B, 1, N]` and
/// the log of integer target durations.
pub fn duration_loss(log_predicted: &Tensor, targets: &[Vec<usize>], mask: &Tensor) -> Result<Tensor> {
    let (b, one, n) = log_predicted.dims3()?;
    if one != 1 || targets.len() != b || mask.dims() != log_predicted.dims() {
        return Err(Error::Shape(format!(
            "log durations {:?}, mask {:?}, {} target rows",
            log_predicted.dims(),
            mask.dims(),
            targets.len()
        )));
    }
    let mut log_t = vec![0f64; b * n];
    for (row, t) in targets.iter().enumerate() {
        if t.len() > n {
            return Err(Error::Shape(format!("target row {row} has {} entries for {n} phonemes", t.len())));
        }
        for (i, &d) in t.iter().enumerate() {
            log_t[row * n + i] = (d.max(1) as f64).ln();
        }
    }
    let log_t = Tensor::from_vec(log_t, (b, 1, n), log_predicted.device())?.to_dtype(log_predicted.dtype())?;
    let sq = (log_predicted - log_t)?.sqr()?.broadcast_mul(mask)?;
    Ok((sq.sum_all()? / mask.sum_all()?.clamp(1.0, f64::INFINITY)?)?)
}
