//! Speech VAE: posterior encoder over linear spectrograms, reparameterised
//! latent sampling, waveform decoder and the mel reconstruction loss.
//!
//! The posterior encoder takes no speaker conditioning; speaker identity is
//! read from its latent downstream.

use candle_core::Tensor;

use crate::audio::spectrogram::{mel_filterbank, reflect_index, StftConfig, LOG_MEL_FLOOR};
use crate::audio::Waveform;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, Conv1d, ConvSpec, ParamPath, Upsample, WaveNet};

const LRELU_SLOPE: f64 = 0.1;

/// Per-frame Gaussian posterior, `[B, d_latent, T]` each.
#[derive(Debug, Clone)]
pub struct PosteriorStats {
    pub mu: Tensor,
    pub log_sigma: Tensor,
    pub mask: Tensor,
}

/// Frame-level latent `[B, d_latent, T]` with its `[B, 1, T]` mask.
#[derive(Debug, Clone)]
pub struct LatentSpeechSequence {
    pub values: Tensor,
    pub mask: Tensor,
}

impl LatentSpeechSequence {
    pub fn n_frames(&self) -> usize {
        self.values.dims()[2]
    }
}

pub(crate) fn check_mask(x: &Tensor, mask: &Tensor, what: &str) -> Result<()> {
    let (b, _, t) = x.dims3()?;
    let (mb, one, mt) = mask.dims3()?;
    if mb != b || one != 1 || mt != t {
        return Err(Error::Shape(format!("{what} is {:?} but mask is {:?}", x.dims(), mask.dims())));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PosteriorEncoder {
    pre: Conv1d,
    wn: WaveNet,
    proj: Conv1d,
    d_latent: usize,
    n_bins: usize,
}

impl PosteriorEncoder {
    pub fn new(p: &mut ParamPath<'_>, cfg: &ModelConfig) -> Result<Self> {
        let h = cfg.posterior_hidden;
        Ok(Self {
            pre: Conv1d::new(&mut p.sub("pre"), cfg.stft.n_bins(), h, ConvSpec::pointwise())?,
            wn: WaveNet::new(&mut p.sub("wn"), h, cfg.posterior_kernel, 1, cfg.posterior_layers, None)?,
            proj: Conv1d::new(&mut p.sub("proj"), h, 2 * cfg.d_latent, ConvSpec::pointwise())?,
            d_latent: cfg.d_latent,
            n_bins: cfg.stft.n_bins(),
        })
    }

    /// `spec [B, n_bins, T]`, `mask [B, 1, T]`. Masked frames yield zero stats.
    pub fn encode(&self, spec: &Tensor, mask: &Tensor) -> Result<PosteriorStats> {
        check_mask(spec, mask, "spectrogram")?;
        if spec.dims()[1] != self.n_bins {
            return Err(Error::Shape(format!("expected {} frequency bins, got {}", self.n_bins, spec.dims()[1])));
        }
        let x = self.pre.forward(&spec.broadcast_mul(mask)?)?.broadcast_mul(mask)?;
        let x = self.wn.forward(&x, mask, None)?;
        let stats = self.proj.forward(&x)?.broadcast_mul(mask)?;
        Ok(PosteriorStats {
            mu: stats.narrow(1, 0, self.d_latent)?,
            log_sigma: stats.narrow(1, self.d_latent, self.d_latent)?,
            mask: mask.clone(),
        })
    }
}

/// `z = mu + exp(log_sigma) * eps`, masked.
pub fn sample_latent(stats: &PosteriorStats, eps: &Tensor) -> Result<LatentSpeechSequence> {
    if eps.dims() != stats.mu.dims() {
        return Err(Error::Shape(format!("noise {:?} vs stats {:?}", eps.dims(), stats.mu.dims())));
    }
    let z = (&stats.mu + (stats.log_sigma.exp()? * eps)?)?.broadcast_mul(&stats.mask)?;
    Ok(LatentSpeechSequence { values: z, mask: stats.mask.clone() })
}

/// Deterministic latent at the posterior mean.
pub fn mean_latent(stats: &PosteriorStats) -> LatentSpeechSequence {
    LatentSpeechSequence { values: stats.mu.clone(), mask: stats.mask.clone() }
}

#[derive(Debug, Clone)]
struct ResBlock {
    dilated: Vec<Conv1d>,
    plain: Vec<Conv1d>,
}

impl ResBlock {
    fn new(p: &mut ParamPath<'_>, ch: usize, kernel: usize, dilations: &[usize]) -> Result<Self> {
        let mut dilated = Vec::new();
        let mut plain = Vec::new();
        for (i, &d) in dilations.iter().enumerate() {
            dilated.push(Conv1d::new(&mut p.sub(format!("dilated.{i}")), ch, ch, ConvSpec::same(kernel, d))?);
            plain.push(Conv1d::new(&mut p.sub(format!("plain.{i}")), ch, ch, ConvSpec::same(kernel, 1))?);
        }
        Ok(Self { dilated, plain })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for (c1, c2) in self.dilated.iter().zip(&self.plain) {
            let xt = c1.forward(&leaky_relu(&x, LRELU_SLOPE)?)?;
            let xt = c2.forward(&leaky_relu(&xt, LRELU_SLOPE)?)?;
            x = (x + xt)?;
        }
        Ok(x)
    }
}

/// Latent-to-waveform generator; total upsampling equals the STFT hop.
#[derive(Debug, Clone)]
pub struct Decoder {
    pre: Conv1d,
    ups: Vec<Upsample>,
    blocks: Vec<ResBlock>,
    post: Conv1d,
    hop: usize,
}

impl Decoder {
    pub fn new(p: &mut ParamPath<'_>, cfg: &ModelConfig) -> Result<Self> {
        let mut ch = cfg.decoder_channels;
        let pre = Conv1d::new(&mut p.sub("pre"), cfg.d_latent, ch, ConvSpec::same(7, 1))?;
        let mut ups = Vec::new();
        let mut blocks = Vec::new();
        for (i, &u) in cfg.decoder_upsample.iter().enumerate() {
            ups.push(Upsample::new(&mut p.sub(format!("up.{i}")), ch, ch / 2, u, cfg.decoder_upsample_kernel)?);
            ch /= 2;
            blocks.push(ResBlock::new(
                &mut p.sub(format!("res.{i}")),
                ch,
                cfg.decoder_res_kernel,
                &cfg.decoder_res_dilations,
            )?);
        }
        let post = Conv1d::new(&mut p.sub("post"), ch, 1, ConvSpec::same(7, 1))?;
        Ok(Self { pre, ups, blocks, post, hop: cfg.decoder_upsample.iter().product() })
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    /// `z [B, d_latent, T] -> [B, 1, T * hop]`, bounded to [-1, 1].
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut x = self.pre.forward(z)?;
        for (up, block) in self.ups.iter().zip(&self.blocks) {
            x = up.forward(&leaky_relu(&x, LRELU_SLOPE)?)?;
            x = block.forward(&x)?;
        }
        Ok(self.post.forward(&leaky_relu(&x, 0.01)?)?.tanh()?)
    }

    pub fn decode_waveform(&self, z: &LatentSpeechSequence, sample_rate: u32) -> Result<Vec<Waveform>> {
        if z.n_frames() == 0 {
            return Err(Error::InvalidArgument("cannot decode an empty latent".into()));
        }
        let y = self.forward(&z.values.broadcast_mul(&z.mask)?)?;
        let lengths: Vec<f64> = z.mask.sum(2)?.squeeze(1)?.to_dtype(candle_core::DType::F64)?.to_vec1()?;
        let rows: Vec<Vec<f32>> = y.squeeze(1)?.to_dtype(candle_core::DType::F32)?.to_vec2()?;
        rows.into_iter()
            .zip(lengths)
            .map(|(row, frames)| {
                let n = frames.round() as usize * self.hop;
                Waveform::new(row[..n].to_vec(), sample_rate)
            })
            .collect()
    }
}

/// Differentiable log-mel front end: STFT as a product of gathered frames with a
/// windowed DFT basis, reflective centre padding, Slaney mel filterbank.
#[derive(Debug, Clone)]
pub struct MelTransform {
    basis: Tensor,
    filterbank: Tensor,
    cfg: StftConfig,
}

impl MelTransform {
    pub fn new(cfg: &StftConfig, dtype: candle_core::DType, device: &candle_core::Device) -> Result<Self> {
        cfg.validate()?;
        let n_bins = cfg.n_bins();
        let window = cfg.window();
        let mut basis = Vec::with_capacity(2 * n_bins * cfg.n_fft);
        for part in 0..2 {
            for k in 0..n_bins {
                for (n, w) in window.iter().enumerate() {
                    let ang = 2.0 * std::f64::consts::PI * ((k * n) % cfg.n_fft) as f64 / cfg.n_fft as f64;
                    basis.push(w * if part == 0 { ang.cos() } else { -ang.sin() });
                }
            }
        }
        let basis = Tensor::from_vec(basis, (2 * n_bins, cfg.n_fft), device)?.t()?.contiguous()?.to_dtype(dtype)?;
        let fb: Vec<f64> = mel_filterbank(cfg).into_iter().flatten().collect();
        let filterbank = Tensor::from_vec(fb, (cfg.mel_bins, n_bins), device)?.to_dtype(dtype)?;
        Ok(Self { basis, filterbank, cfg: *cfg })
    }

    /// `y [B, 1, L] -> [B, mel_bins, 1 + L / hop]` log-mel.
    pub fn forward(&self, y: &Tensor) -> Result<Tensor> {
        let (b, _, len) = y.dims3()?;
        let (n_fft, hop) = (self.cfg.n_fft, self.cfg.hop);
        let pad = n_fft / 2;
        let frames = 1 + len / hop;
        let idx: Vec<u32> = (0..frames)
            .flat_map(|f| (0..n_fft).map(move |n| reflect_index((f * hop + n) as isize - pad as isize, len) as u32))
            .collect();
        let idx = Tensor::from_vec(idx, frames * n_fft, y.device())?;
        let framed = y.reshape((b, len))?.index_select(&idx, 1)?.reshape((b, frames, n_fft))?;
        let spec = framed.broadcast_matmul(&self.basis)?.transpose(1, 2)?;
        let n_bins = self.cfg.n_bins();
        let re = spec.narrow(1, 0, n_bins)?;
        let im = spec.narrow(1, n_bins, n_bins)?;
        let mag = ((re.sqr()? + im.sqr()?)? + 1e-12)?.sqrt()?;
        let mel = self.filterbank.broadcast_matmul(&mag)?;
        Ok(mel.clamp(LOG_MEL_FLOOR, f64::INFINITY)?.log()?)
    }
}

/// Mean absolute log-mel difference between `y_hat` and `y` (`[B, 1, L]`).
pub fn reconstruction_loss(mel: &MelTransform, y_hat: &Tensor, y: &Tensor) -> Result<Tensor> {
    if y_hat.dims() != y.dims() {
        return Err(Error::Shape(format!("y_hat {:?} vs y {:?}", y_hat.dims(), y.dims())));
    }
    let a = mel.forward(y_hat)?;
    let b = mel.forward(y)?;
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Per-item reconstruction loss as a scalar, for waveforms of equal length.
pub fn waveform_reconstruction_loss(mel: &MelTransform, y_hat: &Waveform, y: &Waveform) -> Result<f64> {
    if y_hat.len() != y.len() {
        return Err(Error::Shape(format!("waveform lengths differ: {} vs {}", y_hat.len(), y.len())));
    }
    let dev = mel.basis.device();
    let dt = mel.basis.dtype();
    let to_t = |w: &Waveform| -> Result<Tensor> {
        Ok(Tensor::from_slice(w.samples(), (1, 1, w.len()), dev)?.to_dtype(dt)?)
    };
    let loss = reconstruction_loss(mel, &to_t(y_hat)?, &to_t(y)?)?;
    Ok(loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::batch::sequence_mask;
    use crate::audio::spectrogram::Stft;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn tone(n: usize) -> Waveform {
        Waveform::new((0..n).map(|i| (i as f32 * 0.05).sin() * 0.5 + (i as f32 * 0.31).cos() * 0.2).collect(), 22050).unwrap()
    }

    #[test]
    fn differentiable_mel_matches_host_stft() {
        let cfg = StftConfig::default();
        let w = tone(5000);
        let host = Stft::new(cfg).unwrap().log_mel(&w).unwrap();
        let mel = MelTransform::new(&cfg, DType::F64, &Device::Cpu).unwrap();
        let y = Tensor::from_slice(w.samples(), (1, 1, w.len()), &Device::Cpu).unwrap().to_dtype(DType::F64).unwrap();
        let out: Vec<Vec<f64>> = mel.forward(&y).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        assert_eq!(out[0].len(), host.len());
        for (t, frame) in host.iter().enumerate() {
            for (m, &v) in frame.iter().enumerate() {
                assert!((out[m][t] - v as f64).abs() < 1e-3, "frame {t} bin {m}: {} vs {v}", out[m][t]);
            }
        }
        assert_eq!(waveform_reconstruction_loss(&mel, &w, &w).unwrap(), 0.0);
        assert!(waveform_reconstruction_loss(&mel, &w, &tone(4000)).is_err());
    }

    fn model(dtype: DType) -> (ParamStore, PosteriorEncoder, Decoder, ModelConfig) {
        let cfg = ModelConfig::toy(4);
        let mut store = ParamStore::new(2, dtype, &Device::Cpu);
        let enc = PosteriorEncoder::new(&mut store.root().sub("enc"), &cfg).unwrap();
        let dec = Decoder::new(&mut store.root().sub("dec"), &cfg).unwrap();
        (store, enc, dec, cfg)
    }

    #[test]
    fn posterior_respects_mask() {
        let (_s, enc, _d, cfg) = model(DType::F64);
        let f = cfg.stft.n_bins();
        let spec = Tensor::randn(0f64, 1.0, (2, f, 12), &Device::Cpu).unwrap().abs().unwrap();
        let mask = sequence_mask(&[12, 7], 12, DType::F64, &Device::Cpu).unwrap();
        let stats = enc.encode(&spec, &mask).unwrap();
        assert_eq!(stats.mu.dims(), &[2, cfg.d_latent, 12]);
        let tail: f64 = stats.mu.narrow(0, 1, 1).unwrap().narrow(2, 7, 5).unwrap().abs().unwrap().sum_all().unwrap().to_scalar().unwrap();
        assert_eq!(tail, 0.0);
        let alone = enc
            .encode(&spec.narrow(0, 1, 1).unwrap().narrow(2, 0, 7).unwrap(), &Tensor::ones((1, 1, 7), DType::F64, &Device::Cpu).unwrap())
            .unwrap();
        let a = stats.mu.narrow(0, 1, 1).unwrap().narrow(2, 0, 7).unwrap();
        let d: f64 = (a - alone.mu).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(d < 1e-10);
        let eps = Tensor::zeros(stats.mu.dims(), DType::F64, &Device::Cpu).unwrap();
        let z = sample_latent(&stats, &eps).unwrap();
        let m = mean_latent(&stats);
        let d: f64 = (z.values - m.values).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn decoder_length_and_trim() {
        let (_s, _e, dec, cfg) = model(DType::F32);
        let z = Tensor::randn(0f32, 1.0, (2, cfg.d_latent, 10), &Device::Cpu).unwrap();
        let y = dec.forward(&z).unwrap();
        assert_eq!(y.dims(), &[2, 1, 10 * cfg.stft.hop]);
        let max: f32 = y.abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(max <= 1.0);
        let mask = sequence_mask(&[10, 4], 10, DType::F32, &Device::Cpu).unwrap();
        let waves = dec.decode_waveform(&LatentSpeechSequence { values: z, mask }, 22050).unwrap();
        assert_eq!(waves[0].len(), 10 * 256);
        assert_eq!(waves[1].len(), 4 * 256);
    }
}
