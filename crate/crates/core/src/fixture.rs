//! Deterministic synthetic speech corpus: a small source-filter voice model
//! with speaker-specific pitch and vocal-tract scaling, used for smoke
//! training and evaluation.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::audio::batch::Dataset;
use crate::audio::manifest::UtteranceRecord;
use crate::audio::spectrogram::StftConfig;
use crate::audio::{Waveform, CANONICAL_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::phoneme::Vocabulary;
use crate::rng;

#[derive(Debug, Clone, Copy)]
struct Articulation {
    symbol: &'static str,
    formants: [f64; 3],
    voiced: f64,
    noise: f64,
    noise_centre: f64,
    min_s: f64,
    max_s: f64,
}

const fn vowel(symbol: &'static str, f1: f64, f2: f64, f3: f64) -> Articulation {
    Articulation { symbol, formants: [f1, f2, f3], voiced: 1.0, noise: 0.0, noise_centre: 0.0, min_s: 0.09, max_s: 0.18 }
}

const INVENTORY: [Articulation; 11] = [
    Articulation { symbol: "sil", formants: [500.0, 1500.0, 2500.0], voiced: 0.0, noise: 0.0, noise_centre: 1000.0, min_s: 0.08, max_s: 0.12 },
    vowel("a", 730.0, 1090.0, 2440.0),
    vowel("e", 530.0, 1840.0, 2480.0),
    vowel("i", 270.0, 2290.0, 3010.0),
    vowel("o", 570.0, 840.0, 2410.0),
    vowel("u", 300.0, 870.0, 2240.0),
    Articulation { symbol: "m", formants: [250.0, 1000.0, 2200.0], voiced: 0.35, noise: 0.0, noise_centre: 0.0, min_s: 0.05, max_s: 0.09 },
    Articulation { symbol: "n", formants: [250.0, 1400.0, 2500.0], voiced: 0.35, noise: 0.0, noise_centre: 0.0, min_s: 0.05, max_s: 0.09 },
    Articulation { symbol: "s", formants: [400.0, 1600.0, 2600.0], voiced: 0.0, noise: 0.5, noise_centre: 5500.0, min_s: 0.06, max_s: 0.11 },
    Articulation { symbol: "f", formants: [400.0, 1400.0, 2400.0], voiced: 0.0, noise: 0.3, noise_centre: 3200.0, min_s: 0.05, max_s: 0.10 },
    Articulation { symbol: "sh", formants: [400.0, 1700.0, 2500.0], voiced: 0.0, noise: 0.5, noise_centre: 2600.0, min_s: 0.06, max_s: 0.11 },
];

/// Phoneme symbols produced by the generator, in vocabulary order.
pub fn phoneme_inventory() -> Vec<String> {
    INVENTORY.iter().map(|a| a.symbol.to_string()).collect()
}

fn articulation(symbol: &str) -> Result<&'static Articulation> {
    INVENTORY.iter().find(|a| a.symbol == symbol).ok_or_else(|| Error::UnknownSymbol(symbol.to_string()))
}

/// Voice parameters of one synthetic speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct Voice {
    pub id: String,
    pub f0_hz: f64,
    /// Multiplier on all formant frequencies (vocal-tract length).
    pub formant_scale: f64,
    /// Spectral tilt of the glottal source, in (0, 1); larger is darker.
    pub tilt: f64,
}

impl Voice {
    pub fn new(id: &str, f0_hz: f64, formant_scale: f64, tilt: f64) -> Self {
        Self { id: id.to_string(), f0_hz, formant_scale, tilt }
    }
}

/// Two clearly separated default voices.
pub fn default_voices() -> Vec<Voice> {
    vec![Voice::new("spk_a", 105.0, 0.92, 0.75), Voice::new("spk_b", 215.0, 1.2, 0.45)]
}

/// Two-pole resonator with unity peak gain.
#[derive(Default)]
struct Resonator {
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn tick(&mut self, x: f64, freq: f64, bandwidth: f64, sr: f64) -> f64 {
        let r = (-PI * bandwidth / sr).exp();
        let theta = 2.0 * PI * freq.min(0.45 * sr) / sr;
        let gain = (1.0 - r) * (1.0 - 2.0 * r * (2.0 * theta).cos() + r * r).sqrt();
        let y = gain * x + 2.0 * r * theta.cos() * self.y1 - r * r * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Random phoneme string of roughly `seconds` length with durations, framed by silence.
pub fn random_script<R: Rng + ?Sized>(rng: &mut R, seconds: f64) -> Vec<(String, f64)> {
    let vowels = &INVENTORY[1..6];
    let consonants = &INVENTORY[6..];
    let mut out = vec![("sil".to_string(), 0.1)];
    let mut total = 0.1;
    while total < seconds - 0.3 {
        let pool = if out.len() % 2 == 1 { consonants } else { vowels };
        let a = pool.choose(rng).expect("non-empty inventory");
        let d = rng.random_range(a.min_s..=a.max_s);
        out.push((a.symbol.to_string(), d));
        total += d;
    }
    out.push(("sil".to_string(), (seconds - total).max(0.08)));
    out
}

/// Renders a timed phoneme string with `voice`.
pub fn synthesize<R: Rng + ?Sized>(voice: &Voice, script: &[(String, f64)], sample_rate: u32, rng: &mut R) -> Result<Waveform> {
    let sr = sample_rate as f64;
    let mut targets: Vec<&Articulation> = Vec::new();
    for (sym, dur) in script {
        let a = articulation(sym)?;
        let n = (dur * sr).round() as usize;
        targets.extend(std::iter::repeat_n(a, n));
    }
    if targets.is_empty() {
        return Err(Error::InvalidArgument("empty script".into()));
    }
    let smooth = 1.0 - (-1.0 / (0.012 * sr)).exp();
    let mut formants = targets[0].formants.map(|f| f * voice.formant_scale);
    let (mut voiced, mut noise, mut centre) = (0.0, 0.0, targets[0].noise_centre.max(1000.0));
    let mut res = [Resonator::default(), Resonator::default(), Resonator::default()];
    let mut fric = Resonator::default();
    let mut phase = 0.0;
    let mut tilt_state = 0.0;
    let vibrato = rng.random_range(0.0..2.0 * PI);
    let mut out = Vec::with_capacity(targets.len());
    for (i, a) in targets.iter().enumerate() {
        for k in 0..3 {
            formants[k] += smooth * (a.formants[k] * voice.formant_scale - formants[k]);
        }
        voiced += smooth * (a.voiced - voiced);
        noise += smooth * (a.noise - noise);
        if a.noise > 0.0 {
            centre += smooth * (a.noise_centre - centre);
        }
        let t = i as f64 / sr;
        let f0 = voice.f0_hz * (1.0 + 0.04 * (2.0 * PI * 2.5 * t + vibrato).sin());
        phase += f0 / sr;
        let pulse = if phase >= 1.0 {
            phase -= 1.0;
            1.0
        } else {
            0.0
        };
        tilt_state = voice.tilt * tilt_state + (1.0 - voice.tilt) * pulse;
        let mut v = 0.0;
        for (k, r) in res.iter_mut().enumerate() {
            v += r.tick(tilt_state, formants[k], 60.0 + 30.0 * k as f64, sr) / (1.0 + k as f64);
        }
        let white: f64 = rng.random_range(-1.0..1.0);
        let n = fric.tick(white, centre, 900.0, sr);
        out.push((voiced * v * 6.0 + noise * n) as f32);
    }
    Ok(Waveform::new(out, sample_rate)?.normalized(0.8))
}

#[derive(Debug, Clone)]
pub struct FixtureSpec {
    pub voices: Vec<Voice>,
    pub train_per_speaker: usize,
    pub eval_per_speaker: usize,
    pub train_seconds: f64,
    pub eval_seconds: f64,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self { voices: default_voices(), train_per_speaker: 4, eval_per_speaker: 2, train_seconds: 3.0, eval_seconds: 5.5, seed: 7 }
    }
}

/// Paths written by [`write_fixture`].
#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub root: PathBuf,
    pub train_manifest: PathBuf,
    pub eval_manifest: PathBuf,
    pub vocab: PathBuf,
}

/// Writes WAVs, train/eval manifests and the vocabulary under `dir`.
/// Every fixture utterance as `(file name, record, waveform, is_train)`.
fn generate(spec: &FixtureSpec) -> Result<Vec<(String, UtteranceRecord, Waveform, bool)>> {
    let mut out = Vec::new();
    for (vi, voice) in spec.voices.iter().enumerate() {
        for u in 0..spec.train_per_speaker + spec.eval_per_speaker {
            let mut r = rng::derive(spec.seed, &[vi as u64, u as u64]);
            let is_train = u < spec.train_per_speaker;
            let seconds = if is_train { spec.train_seconds } else { spec.eval_seconds };
            let script = random_script(&mut r, seconds);
            let wave = synthesize(voice, &script, CANONICAL_SAMPLE_RATE, &mut r)?;
            let name = format!("{}_{u:02}.wav", voice.id);
            let record = UtteranceRecord {
                audio_path: PathBuf::from("wavs").join(&name),
                speaker_id: voice.id.clone(),
                phonemes: script.iter().map(|(s, _)| s.clone()).collect(),
                duration_s: wave.duration_s(),
            };
            out.push((name, record, wave, is_train));
        }
    }
    Ok(out)
}

pub fn write_fixture(dir: impl AsRef<Path>, spec: &FixtureSpec) -> Result<FixturePaths> {
    let dir = dir.as_ref();
    let wav_dir = dir.join("wavs");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (name, record, wave, is_train) in generate(spec)? {
        wave.write_wav(wav_dir.join(&name))?;
        if is_train { train.push(record) } else { eval.push(record) }
    }
    let paths = FixturePaths {
        root: dir.to_path_buf(),
        train_manifest: dir.join("train.txt"),
        eval_manifest: dir.join("eval.txt"),
        vocab: dir.join("phonemes.txt"),
    };
    for (path, records) in [(&paths.train_manifest, &train), (&paths.eval_manifest, &eval)] {
        let text: String = records.iter().map(|r| r.to_line() + "\n").collect();
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Vocabulary::new(phoneme_inventory())?.save(&paths.vocab)?;
    Ok(paths)
}

/// The training split as an in-memory dataset, without touching disk.
pub fn fixture_dataset(spec: &FixtureSpec, stft: StftConfig) -> Result<(Dataset, Vocabulary)> {
    let vocab = Vocabulary::new(phoneme_inventory())?;
    let (records, waves): (Vec<_>, Vec<_>) =
        generate(spec)?.into_iter().filter(|u| u.3).map(|(_, r, w, _)| (r, w.resample(stft.sample_rate))).unzip();
    let waves = waves.into_iter().collect::<Result<Vec<_>>>()?;
    Ok((Dataset::from_waveforms(records, waves, &vocab, stft)?, vocab))
}
