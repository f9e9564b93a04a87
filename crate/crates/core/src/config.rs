//! Model and training hyperparameters with toy/full presets.

use serde::{Deserialize, Serialize};

use crate::audio::spectrogram::StftConfig;
use crate::error::{Error, Result};

/// What the speaker encoder consumes. `Spectrogram` exists only as an
/// ablation; the default extracts embeddings from the VAE latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeakerInput {
    Latent,
    Spectrogram,
}

impl std::str::FromStr for SpeakerInput {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent" => Ok(Self::Latent),
            "spectrogram" => Ok(Self::Spectrogram),
            other => Err(Error::Config(format!("speaker_input must be latent|spectrogram, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for SpeakerInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Latent => "latent",
            Self::Spectrogram => "spectrogram",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stft: StftConfig,
    pub vocab_size: usize,
    pub d_latent: usize,
    pub d_spk: usize,

    pub posterior_hidden: usize,
    pub posterior_kernel: usize,
    pub posterior_layers: usize,

    pub decoder_channels: usize,
    pub decoder_upsample: Vec<usize>,
    pub decoder_upsample_kernel: usize,
    pub decoder_res_kernel: usize,
    pub decoder_res_dilations: Vec<usize>,

    pub text_hidden: usize,
    pub text_heads: usize,
    pub text_layers: usize,
    pub text_ffn: usize,
    pub text_kernel: usize,
    pub text_window: usize,

    pub duration_filters: usize,
    pub duration_kernel: usize,

    pub speaker_channels: usize,
    pub speaker_blocks: usize,
    pub speaker_scale: usize,
    pub speaker_attention: usize,
    pub speaker_input: SpeakerInput,

    pub flow_layers: usize,
    pub flow_hidden: usize,
    pub flow_kernel: usize,
    pub flow_wn_layers: usize,
    pub flow_log_scale_clamp: f64,

    pub dt_channels: usize,
    pub dt_blocks: usize,
    pub dt_scale: usize,
    pub dt_attention: usize,
}

impl ModelConfig {
    /// Desk-scale model for CPU training and tests.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            stft: StftConfig::default(),
            vocab_size,
            d_latent: 16,
            d_spk: 32,
            posterior_hidden: 48,
            posterior_kernel: 5,
            posterior_layers: 4,
            decoder_channels: 64,
            decoder_upsample: vec![8, 8, 4],
            decoder_upsample_kernel: 3,
            decoder_res_kernel: 3,
            decoder_res_dilations: vec![1, 3],
            text_hidden: 48,
            text_heads: 2,
            text_layers: 2,
            text_ffn: 96,
            text_kernel: 3,
            text_window: 4,
            duration_filters: 48,
            duration_kernel: 3,
            speaker_channels: 48,
            speaker_blocks: 2,
            speaker_scale: 4,
            speaker_attention: 32,
            speaker_input: SpeakerInput::Latent,
            flow_layers: 4,
            flow_hidden: 32,
            flow_kernel: 5,
            flow_wn_layers: 2,
            flow_log_scale_clamp: 5.0,
            dt_channels: 32,
            dt_blocks: 2,
            dt_scale: 4,
            dt_attention: 32,
        }
    }

    /// Baseline-family sizes.
    pub fn full(vocab_size: usize) -> Self {
        Self {
            d_latent: 192,
            d_spk: 256,
            posterior_hidden: 192,
            posterior_layers: 16,
            decoder_channels: 512,
            decoder_upsample: vec![8, 8, 2, 2],
            decoder_upsample_kernel: 5,
            decoder_res_dilations: vec![1, 3, 5],
            text_hidden: 192,
            text_layers: 6,
            text_ffn: 768,
            duration_filters: 256,
            speaker_channels: 512,
            speaker_blocks: 3,
            speaker_scale: 8,
            speaker_attention: 128,
            flow_hidden: 192,
            flow_wn_layers: 4,
            dt_channels: 128,
            dt_attention: 64,
            ..Self::toy(vocab_size)
        }
    }

    pub fn speaker_input_channels(&self) -> usize {
        match self.speaker_input {
            SpeakerInput::Latent => self.d_latent,
            SpeakerInput::Spectrogram => self.stft.n_bins(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        let product: usize = self.decoder_upsample.iter().product();
        if product != self.stft.hop {
            return Err(Error::Config(format!(
                "decoder upsample factors multiply to {product}, hop is {}",
                self.stft.hop
            )));
        }
        let mut ch = self.decoder_channels;
        for _ in &self.decoder_upsample {
            if ch < 2 {
                return Err(Error::Config("decoder_channels too small for the upsampling stages".into()));
            }
            ch /= 2;
        }
        if self.d_latent < 2 || self.d_latent % 2 != 0 {
            return Err(Error::Config("d_latent must be even and >= 2".into()));
        }
        if self.text_hidden % self.text_heads != 0 {
            return Err(Error::Config("text_hidden must be divisible by text_heads".into()));
        }
        if self.speaker_channels % self.speaker_scale != 0 || self.dt_channels % self.dt_scale != 0 {
            return Err(Error::Config("res2 channels must be divisible by scale".into()));
        }
        for (name, k) in [
            ("posterior_kernel", self.posterior_kernel),
            ("flow_kernel", self.flow_kernel),
            ("text_kernel", self.text_kernel),
            ("duration_kernel", self.duration_kernel),
            ("decoder_res_kernel", self.decoder_res_kernel),
            ("decoder_upsample_kernel", self.decoder_upsample_kernel),
        ] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd")));
            }
        }
        if self.vocab_size == 0 || self.d_spk == 0 || self.flow_layers == 0 {
            return Err(Error::Config("vocab_size, d_spk and flow_layers must be positive".into()));
        }
        if !(self.flow_log_scale_clamp > 0.0) {
            return Err(Error::Config("flow_log_scale_clamp must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_se: f64,
    pub lambda_d: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub grad_clip: f64,
    pub recon_weight: f64,
    pub kl_weight: f64,
    pub duration_weight: f64,
    pub segment_frames: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_se: 8.0,
            lambda_d: 8.0,
            rho_min: 0.2,
            rho_max: 0.4,
            batch_size: 64,
            learning_rate: 2e-4,
            beta1: 0.8,
            beta2: 0.99,
            adam_eps: 1e-9,
            weight_decay: 0.01,
            lr_decay: 0.999875,
            grad_clip: 5.0,
            recon_weight: 45.0,
            kl_weight: 1.0,
            duration_weight: 1.0,
            segment_frames: 32,
            seed: 1234,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("lr_decay", self.lr_decay),
            ("grad_clip", self.grad_clip),
            ("segment_frames", self.segment_frames as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("lambda_se", self.lambda_se),
            ("lambda_d", self.lambda_d),
            ("weight_decay", self.weight_decay),
            ("recon_weight", self.recon_weight),
            ("kl_weight", self.kl_weight),
            ("duration_weight", self.duration_weight),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(0.0 < self.rho_min && self.rho_min <= self.rho_max && self.rho_max < 1.0) {
            return Err(Error::Config(format!(
                "rho range must satisfy 0 < rho_min <= rho_max < 1, got [{}, {}]",
                self.rho_min, self.rho_max
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at_epoch(&self, epoch: u64) -> f64 {
        self.learning_rate * self.lr_decay.powi(epoch as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::toy(10).validate().unwrap();
        ModelConfig::full(10).validate().unwrap();
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn upsample_product_must_equal_hop() {
        let mut c = ModelConfig::toy(10);
        c.decoder_upsample = vec![8, 8, 2];
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_hyperparameters() {
        let t = TrainConfig::default();
        assert_eq!((t.lambda_se, t.lambda_d), (8.0, 8.0));
        assert_eq!((t.beta1, t.beta2, t.weight_decay), (0.8, 0.99, 0.01));
        assert_eq!(t.learning_rate, 2e-4);
        assert_eq!(t.lr_decay, 0.999875);
        assert_eq!(t.batch_size, 64);
        assert_eq!((t.rho_min, t.rho_max), (0.2, 0.4));
    }

    #[test]
    fn lr_schedule_is_geometric() {
        let t = TrainConfig::default();
        for k in [0u64, 1, 7, 1000] {
            assert_eq!(t.lr_at_epoch(k), 2e-4 * 0.999875f64.powi(k as i32));
        }
    }

    #[test]
    fn bad_rho_range_is_rejected() {
        let t = TrainConfig { rho_min: 0.5, rho_max: 0.4, ..TrainConfig::default() };
        assert!(t.validate().is_err());
    }
}
