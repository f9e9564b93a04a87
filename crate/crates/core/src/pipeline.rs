//! Inference: zero-shot text-to-speech and voice conversion from a single
//! reference utterance.

use candle_core::{DType, Tensor};

use crate::audio::spectrogram::Stft;
use crate::audio::Waveform;
use crate::config::SpeakerInput;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::host_normal;
use crate::phoneme::{expand_exact, round_durations, Alignment, Vocabulary};
use crate::rng::{self, tag};
use crate::vae::{mean_latent, sample_latent, LatentSpeechSequence};

pub const MIN_REFERENCE_SECONDS: f64 = 0.5;
pub const DEFAULT_TEMPERATURE: f64 = 0.667;

/// What to synthesize. Ground-truth target speech is never part of a request.
#[derive(Debug, Clone)]
pub enum SynthesisRequest {
    Tts { phonemes: Vec<String>, reference: Waveform, pace: f64 },
    Vc { source: Waveform, reference: Waveform },
}

impl SynthesisRequest {
    pub fn validate(&self) -> Result<()> {
        let check_audio = |w: &Waveform, what: &str| {
            if w.duration_s() < MIN_REFERENCE_SECONDS {
                return Err(Error::TooShort(format!(
                    "{what} is {:.3} s; at least {MIN_REFERENCE_SECONDS} s is required",
                    w.duration_s()
                )));
            }
            Ok(())
        };
        match self {
            Self::Tts { phonemes, reference, pace } => {
                if phonemes.is_empty() {
                    return Err(Error::InvalidArgument("no phonemes to synthesize".into()));
                }
                if !(*pace > 0.0 && pace.is_finite()) {
                    return Err(Error::InvalidArgument(format!("pace must be positive, got {pace}")));
                }
                check_audio(reference, "reference")
            }
            Self::Vc { source, reference } => {
                check_audio(source, "source")?;
                check_audio(reference, "reference")
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TtsOutput {
    pub waveform: Waveform,
    pub durations: Vec<usize>,
}

/// A loaded model ready to serve requests.
pub struct Synthesizer {
    pub model: Model,
    pub vocab: Vocabulary,
    pub temperature: f64,
}

impl Synthesizer {
    pub fn new(model: Model, vocab: Vocabulary) -> Result<Self> {
        if vocab.len() != model.cfg.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} symbols, model expects {}",
                vocab.len(),
                model.cfg.vocab_size
            )));
        }
        Ok(Self { model, vocab, temperature: DEFAULT_TEMPERATURE })
    }

    fn dtype(&self) -> DType {
        self.model.dtype()
    }

    /// Linear spectrogram `[1, F, T]` of `w` at the model rate, with an all-ones mask.
    pub fn spectrogram(&self, w: &Waveform) -> Result<(Tensor, Tensor)> {
        let stft_cfg = self.model.cfg.stft;
        let w = w.resample(stft_cfg.sample_rate)?;
        let spec = Stft::new(stft_cfg)?.linear(&w)?;
        let (t, f) = (spec.n_frames(), spec.n_bins());
        let dev = self.model.device();
        let x = Tensor::from_vec(spec.transposed(), (1, f, t), dev)?.to_dtype(self.dtype())?;
        Ok((x, Tensor::ones((1, 1, t), self.dtype(), dev)?))
    }

    /// Posterior latent of `w`: a sample when `seed` is given, the mean otherwise.
    pub fn latent(&self, w: &Waveform, seed: Option<(u64, u64)>) -> Result<(LatentSpeechSequence, Tensor)> {
        let (spec, mask) = self.spectrogram(w)?;
        let stats = self.model.posterior.encode(&spec, &mask)?;
        let z = match seed {
            Some((seed, salt)) => {
                let mut r = rng::derive(seed, &[tag::INFERENCE, salt]);
                let eps = host_normal(&mut r, stats.mu.dims(), self.dtype(), self.model.device())?;
                sample_latent(&stats, &eps)?
            }
            None => mean_latent(&stats),
        };
        Ok((z, spec))
    }

    fn embed_latent(&self, z: &LatentSpeechSequence, spec: &Tensor) -> Result<Tensor> {
        let t = z.n_frames();
        let e = match self.model.speaker.input_kind() {
            SpeakerInput::Latent => self.model.speaker.extract_embedding(z, (0, t))?,
            SpeakerInput::Spectrogram => self.model.speaker.extract_from_spectrogram(spec, (0, t))?,
        };
        Ok(e.vector.unsqueeze(0)?)
    }

    /// Speaker embedding of `w` over its full length, from the posterior mean.
    pub fn embed(&self, w: &Waveform) -> Result<Vec<f64>> {
        let (z, spec) = self.latent(w, None)?;
        Ok(self.embed_latent(&z, &spec)?.squeeze(0)?.to_dtype(DType::F64)?.to_vec1()?)
    }

    pub fn synthesize(&self, request: &SynthesisRequest, seed: u64) -> Result<Waveform> {
        match request {
            SynthesisRequest::Tts { phonemes, reference, pace } => Ok(self.tts(phonemes, reference, *pace, seed)?.waveform),
            SynthesisRequest::Vc { source, reference } => self.vc(source, reference),
        }
    }

    pub fn tts<S: AsRef<str>>(&self, phonemes: &[S], reference: &Waveform, pace: f64, seed: u64) -> Result<TtsOutput> {
        let phonemes: Vec<String> = phonemes.iter().map(|p| p.as_ref().to_string()).collect();
        SynthesisRequest::Tts { phonemes: phonemes.clone(), reference: reference.clone(), pace }.validate()?;
        let dev = self.model.device().clone();
        let (z_ref, spec_ref) = self.latent(reference, Some((seed, 0)))?;
        let s_ref = self.embed_latent(&z_ref, &spec_ref)?;

        let ids = self.vocab.encode(&phonemes)?;
        let n = ids.len();
        let ids = Tensor::from_vec(ids, (1, n), &dev)?;
        let pmask = Tensor::ones((1, 1, n), self.dtype(), &dev)?;
        let text = self.model.text.forward(&ids, &pmask)?;
        let predicted: Vec<f64> =
            self.model.duration.predict(&text.hidden, &pmask, &s_ref)?.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
        let durations = round_durations(&predicted, pace);
        let alignment = Alignment { durations: durations.clone() };
        let frames = alignment.total_frames();
        let mu = expand_exact(&text.mu, &alignment, frames)?;
        let log_sigma = expand_exact(&text.log_sigma, &alignment, frames)?;
        let mut r = rng::derive(seed, &[tag::INFERENCE, 1]);
        let eps = host_normal(&mut r, mu.dims(), self.dtype(), &dev)?;
        let m = (mu + (log_sigma.exp()? * eps)?.affine(self.temperature, 0.0)?)?;
        let fmask = Tensor::ones((1, 1, frames), self.dtype(), &dev)?;
        let z = self.model.flow.forward(&m, &fmask, &s_ref)?;
        let latent = LatentSpeechSequence { values: z, mask: fmask };
        let waveform = self.decode(&latent)?;
        Ok(TtsOutput { waveform, durations })
    }

    /// Converts `source` to the voice of `reference`, keeping the source's
    /// frame count. Both latents are posterior means.
    pub fn vc(&self, source: &Waveform, reference: &Waveform) -> Result<Waveform> {
        SynthesisRequest::Vc { source: source.clone(), reference: reference.clone() }.validate()?;
        let (z_src, spec_src) = self.latent(source, None)?;
        let (z_ref, spec_ref) = self.latent(reference, None)?;
        let s_src = self.embed_latent(&z_src, &spec_src)?;
        let s_ref = self.embed_latent(&z_ref, &spec_ref)?;
        let z = self.convert_latent(&z_src, &s_src, &s_ref)?;
        self.decode(&z)
    }

    /// `forward(reverse(z, s_src), s_ref)` in latent space.
    pub fn convert_latent(&self, z: &LatentSpeechSequence, s_src: &Tensor, s_ref: &Tensor) -> Result<LatentSpeechSequence> {
        let m_hat = self.model.flow.reverse(&z.values, &z.mask, s_src)?;
        let values = self.model.flow.forward(&m_hat, &z.mask, s_ref)?;
        Ok(LatentSpeechSequence { values, mask: z.mask.clone() })
    }

    pub fn decode(&self, z: &LatentSpeechSequence) -> Result<Waveform> {
        let mut out = self.model.decoder.decode_waveform(z, self.model.cfg.stft.sample_rate)?;
        Ok(out.remove(0))
    }
}
