//! Audio ingestion: waveforms, WAV IO, resampling, spectrograms, manifests
//! and training batches.

pub mod batch;
pub mod manifest;
pub mod spectrogram;

use std::path::Path;

use crate::error::{Error, Result};

pub const CANONICAL_SAMPLE_RATE: u32 = 22050;

/// Mono waveform with samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    /// Samples outside [-1, 1] are clipped; non-finite samples are rejected.
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty waveform".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite sample at index {i}")));
        }
        let samples = samples.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect();
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Leading `seconds` of audio. Errors when the waveform is shorter.
    pub fn trim_to(&self, seconds: f64) -> Result<Waveform> {
        let n = (seconds * self.sample_rate as f64).round() as usize;
        if n == 0 || n > self.samples.len() {
            return Err(Error::TooShort(format!(
                "cannot trim {:.3} s waveform to {seconds:.3} s",
                self.duration_s()
            )));
        }
        Ok(Self { samples: self.samples[..n].to_vec(), sample_rate: self.sample_rate })
    }

    /// Peak-normalise to `peak` (no-op on silence).
    pub fn normalized(&self, peak: f32) -> Waveform {
        let max = self.samples.iter().fold(0f32, |m, s| m.max(s.abs()));
        if max == 0.0 {
            return self.clone();
        }
        let g = peak / max;
        Self { samples: self.samples.iter().map(|s| s * g).collect(), sample_rate: self.sample_rate }
    }

    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = hound::WavReader::open(path).map_err(|e| match e {
            hound::Error::IoError(io) => Error::io(path, io),
            other => Error::Wav(other),
        })?;
        let spec = reader.spec();
        let channels = spec.channels.max(1) as usize;
        let interleaved: Vec<f32> = match spec.sample_format {
            hound::SampleFormat::Float => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
            hound::SampleFormat::Int => {
                let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f32 / scale))
                    .collect::<std::result::Result<_, _>>()?
            }
        };
        let mono = interleaved
            .chunks(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect();
        Waveform::new(mono, spec.sample_rate)
    }

    /// Writes 16-bit PCM.
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec).map_err(|e| match e {
            hound::Error::IoError(io) => Error::io(path, io),
            other => Error::Wav(other),
        })?;
        for &s in &self.samples {
            writer.write_sample((s * i16::MAX as f32).round() as i16)?;
        }
        writer.finalize()?;
        Ok(())
    }

    /// Windowed-sinc polyphase resampling to `target` Hz.
    pub fn resample(&self, target: u32) -> Result<Waveform> {
        if target == 0 {
            return Err(Error::InvalidArgument("target sample rate must be positive".into()));
        }
        if target == self.sample_rate {
            return Ok(self.clone());
        }
        let g = gcd(self.sample_rate as u64, target as u64);
        let up = (target as u64 / g) as usize;
        let down = (self.sample_rate as u64 / g) as usize;
        let out = Resampler::new(up, down).run(&self.samples);
        Waveform::new(out, target)
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

const SINC_ZERO_CROSSINGS: f64 = 16.0;

struct Resampler {
    up: usize,
    down: usize,
    half_taps: usize,
    /// `table[phase][k]`, k over 2 * half_taps taps.
    table: Vec<Vec<f64>>,
}

impl Resampler {
    fn new(up: usize, down: usize) -> Self {
        // Low-pass at the narrower of the two Nyquist bands, slightly inside it.
        let cutoff = 0.97 * (up as f64 / down as f64).min(1.0);
        let half_taps = (SINC_ZERO_CROSSINGS / cutoff).ceil() as usize;
        let width = half_taps as f64;
        let table = (0..up)
            .map(|phase| {
                let frac = phase as f64 / up as f64;
                (0..2 * half_taps)
                    .map(|k| {
                        let u = k as f64 - (half_taps as f64 - 1.0) - frac;
                        let x = cutoff * u;
                        let sinc = if x.abs() < 1e-12 {
                            1.0
                        } else {
                            (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
                        };
                        // Hann window over [-width, width]
                        let w = if u.abs() >= width {
                            0.0
                        } else {
                            0.5 * (1.0 + (std::f64::consts::PI * u / width).cos())
                        };
                        cutoff * sinc * w
                    })
                    .collect()
            })
            .collect();
        Self { up, down, half_taps, table }
    }

    fn run(&self, input: &[f32]) -> Vec<f32> {
        let n_out = (input.len() * self.up).div_ceil(self.down);
        let n_in = input.len() as isize;
        (0..n_out)
            .map(|n| {
                let pos = n * self.down;
                let base = (pos / self.up) as isize;
                let phase = pos % self.up;
                let taps = &self.table[phase];
                let first = base - (self.half_taps as isize - 1);
                let mut acc = 0.0f64;
                for (k, &h) in taps.iter().enumerate() {
                    let idx = first + k as isize;
                    if idx >= 0 && idx < n_in {
                        acc += h * input[idx as usize] as f64;
                    }
                }
                acc as f32
            })
            .collect()
    }
}
