//! Magnitude STFT and mel filterbanks.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub win: usize,
    pub mel_bins: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            sample_rate: super::CANONICAL_SAMPLE_RATE,
            n_fft: 1024,
            hop: 256,
            win: 1024,
            mel_bins: 80,
            fmin: 0.0,
            fmax: 8000.0,
        }
    }
}

/// Floor applied before the log in mel-domain losses.
pub const LOG_MEL_FLOOR: f64 = 1e-5;

impl StftConfig {
    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.win || self.win > self.n_fft {
            return Err(Error::Config(format!(
                "need 0 < hop <= win <= n_fft, got hop {} win {} n_fft {}",
                self.hop, self.win, self.n_fft
            )));
        }
        if self.sample_rate == 0 || self.mel_bins == 0 {
            return Err(Error::Config("sample_rate and mel_bins must be positive".into()));
        }
        if !(self.fmin >= 0.0 && self.fmax > self.fmin && self.fmax <= self.sample_rate as f64 / 2.0) {
            return Err(Error::Config(format!("bad mel range {}..{} Hz", self.fmin, self.fmax)));
        }
        Ok(())
    }

    /// Frame count under reflective centre padding.
    pub fn n_frames(&self, n_samples: usize) -> usize {
        1 + n_samples / self.hop
    }

    /// Periodic Hann window of `win` samples centred in an `n_fft` frame.
    pub fn window(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.n_fft];
        let offset = (self.n_fft - self.win) / 2;
        for i in 0..self.win {
            w[offset + i] =
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / self.win as f64).cos();
        }
        w
    }
}

/// Row-major `[n_frames × n_bins]` magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSpectrogram {
    data: Vec<f32>,
    n_frames: usize,
    n_bins: usize,
    pub n_fft: usize,
    pub hop: usize,
    pub win: usize,
}

impl LinearSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.n_bins..(t + 1) * self.n_bins]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Bin-major copy (`[n_bins × n_frames]`), the channel-first model layout.
    pub fn transposed(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.data.len()];
        for t in 0..self.n_frames {
            for f in 0..self.n_bins {
                out[f * self.n_frames + t] = self.data[t * self.n_bins + f];
            }
        }
        out
    }
}

/// Index into `0..len` with whole-sample symmetric reflection (no edge repeat).
pub(crate) fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self { window: cfg.window(), cfg, fft })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn linear(&self, w: &Waveform) -> Result<LinearSpectrogram> {
        if w.is_empty() {
            return Err(Error::InvalidArgument("empty waveform".into()));
        }
        let cfg = &self.cfg;
        let x = w.samples();
        let n_frames = cfg.n_frames(x.len());
        let n_bins = cfg.n_bins();
        let pad = (cfg.n_fft / 2) as isize;
        let mut data = Vec::with_capacity(n_frames * n_bins);
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        for t in 0..n_frames {
            let start = (t * cfg.hop) as isize - pad;
            for (k, slot) in buf.iter_mut().enumerate() {
                let s = x[reflect_index(start + k as isize, x.len())] as f64;
                *slot = Complex::new(s * self.window[k], 0.0);
            }
            self.fft.process(&mut buf);
            data.extend(buf[..n_bins].iter().map(|c| c.norm() as f32));
        }
        Ok(LinearSpectrogram { data, n_frames, n_bins, n_fft: cfg.n_fft, hop: cfg.hop, win: cfg.win })
    }

    /// Log-compressed mel spectrogram `[n_frames × mel_bins]`.
    pub fn log_mel(&self, w: &Waveform) -> Result<Vec<Vec<f32>>> {
        let spec = self.linear(w)?;
        let fb = mel_filterbank(&self.cfg);
        Ok((0..spec.n_frames())
            .map(|t| {
                let frame = spec.frame(t);
                fb.iter()
                    .map(|row| {
                        let e: f64 = row.iter().zip(frame).map(|(a, b)| a * *b as f64).sum();
                        e.max(LOG_MEL_FLOOR).ln() as f32
                    })
                    .collect()
            })
            .collect())
    }
}

/// Convenience wrapper over [`Stft::linear`] with explicit framing parameters.
pub fn compute_linear_spectrogram(
    w: &Waveform,
    n_fft: usize,
    hop: usize,
    win: usize,
) -> Result<LinearSpectrogram> {
    let cfg = StftConfig { n_fft, hop, win, sample_rate: w.sample_rate(), ..StftConfig::default() };
    let cfg = StftConfig { fmax: cfg.fmax.min(w.sample_rate() as f64 / 2.0), ..cfg };
    Stft::new(cfg)?.linear(w)
}

fn hz_to_mel(hz: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if hz >= min_log_hz {
        min_log_mel + (hz / min_log_hz).ln() / logstep
    } else {
        hz / f_sp
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if mel >= min_log_mel {
        min_log_hz * (logstep * (mel - min_log_mel)).exp()
    } else {
        f_sp * mel
    }
}

/// Slaney-scale, area-normalised triangular filters, `[mel_bins][n_bins]`.
pub fn mel_filterbank(cfg: &StftConfig) -> Vec<Vec<f64>> {
    let n_bins = cfg.n_bins();
    let fft_freqs: Vec<f64> =
        (0..n_bins).map(|k| k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64).collect();
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let edges: Vec<f64> = (0..cfg.mel_bins + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.mel_bins + 1) as f64))
        .collect();
    (0..cfg.mel_bins)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (r - l);
            fft_freqs
                .iter()
                .map(|&f| {
                    let up = (f - l) / (c - l);
                    let down = (r - f) / (r - c);
                    up.min(down).max(0.0) * norm
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn wave(samples: Vec<f32>) -> Waveform {
        Waveform::new(samples, 22050).unwrap()
    }

    #[test]
    fn frame_count_for_25600_samples() {
        let s = compute_linear_spectrogram(&wave(vec![0.1; 25600]), 1024, 256, 1024).unwrap();
        assert_eq!(s.n_frames(), 101);
        assert_eq!(s.n_bins(), 513);
    }

    #[test]
    fn zero_waveform_has_zero_magnitudes() {
        let s = compute_linear_spectrogram(&wave(vec![0.0; 4000]), 1024, 256, 1024).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bin_centre_sine_peaks_at_its_bin() {
        // Bin 40 at n_fft 1024: 40 * 22050 / 1024 Hz.
        let bin = 40;
        let freq = bin as f64 * 22050.0 / 1024.0;
        let x: Vec<f32> = (0..8192)
            .map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / 22050.0).sin()) as f32)
            .collect();
        let s = compute_linear_spectrogram(&wave(x.clone()), 1024, 256, 1024).unwrap();
        let frame = s.frame(10);
        let argmax = frame
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, bin);

        // Direct DFT of the same (interior) frame at that bin.
        let win = StftConfig::default().window();
        let start = 10 * 256 - 512;
        let (mut re, mut im) = (0.0f64, 0.0f64);
        for k in 0..1024 {
            let v = x[start + k] as f64 * win[k];
            let ang = -2.0 * std::f64::consts::PI * (bin * k) as f64 / 1024.0;
            re += v * ang.cos();
            im += v * ang.sin();
        }
        let mag = (re * re + im * im).sqrt();
        assert!((frame[bin] as f64 - mag).abs() < 1e-3 * mag);
    }

    #[test]
    fn empty_waveform_is_rejected_by_constructor() {
        assert!(Waveform::new(vec![], 22050).is_err());
    }

    #[test]
    fn bad_framing_is_rejected() {
        assert!(compute_linear_spectrogram(&wave(vec![0.0; 100]), 1024, 2048, 1024).is_err());
        assert!(compute_linear_spectrogram(&wave(vec![0.0; 100]), 512, 256, 1024).is_err());
    }

    #[test]
    fn reflect_index_mirrors_without_repeating_edges() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-5, 1), 0);
    }

    #[test]
    fn filterbank_shape_and_positivity() {
        let cfg = StftConfig::default();
        let fb = mel_filterbank(&cfg);
        assert_eq!(fb.len(), 80);
        assert!(fb.iter().all(|r| r.len() == 513 && r.iter().all(|&v| v >= 0.0)));
        assert!(fb.iter().all(|r| r.iter().any(|&v| v > 0.0)));
        // nothing above fmax
        let top_bin = (8000.0 / (22050.0 / 1024.0)) as usize + 2;
        assert!(fb.iter().all(|r| r[top_bin..].iter().all(|&v| v == 0.0)));
    }

    proptest! {
        #[test]
        fn frame_count_matches_formula(len in 1usize..6000, hop_pow in 6u32..9) {
            let hop = 1usize << hop_pow;
            let s = compute_linear_spectrogram(&wave(vec![0.01; len]), 1024, hop, 1024).unwrap();
            prop_assert_eq!(s.n_frames(), 1 + len / hop);
        }
    }
}
