//! Flat `key = value` run configuration: model and training hyperparameters,
//! data paths and inference/evaluation settings, with `include` of a preset
//! profile or another file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};

/// Settings that are neither model nor optimizer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub train_manifest: String,
    pub eval_manifest: String,
    pub vocab: String,
    pub output_dir: String,
    pub steps: u64,
    pub checkpoint_every: u64,
    /// `f32` or `f64`.
    pub dtype: String,
    pub temperature: f64,
    pub pace: f64,
    pub sweep_lengths: Vec<f64>,
    pub asr_command: String,
    pub embedder_command: String,
    pub normalize_volume: bool,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            train_manifest: String::new(),
            eval_manifest: String::new(),
            vocab: String::new(),
            output_dir: "runs".into(),
            steps: 1000,
            checkpoint_every: 500,
            dtype: "f32".into(),
            temperature: crate::pipeline::DEFAULT_TEMPERATURE,
            pace: 1.0,
            sweep_lengths: vec![1.0, 3.0, 5.0],
            asr_command: String::new(),
            embedder_command: String::new(),
            normalize_volume: false,
        }
    }
}

const PATH_KEYS: [&str; 4] = ["train_manifest", "eval_manifest", "vocab", "output_dir"];

#[derive(Debug, Clone, PartialEq)]
pub struct KeyInfo {
    pub key: String,
    pub toy: String,
    pub full: String,
    pub group: &'static str,
}

/// Merged configuration. `model.vocab_size` is filled from the vocabulary at
/// load time and is not a settable key.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub run: RunSettings,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Section {
    Stft,
    Model,
    Train,
    Run,
}

fn object(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => unreachable!("config structs serialize to objects"),
    }
}

struct Flat {
    values: BTreeMap<String, (Section, Value)>,
}

impl Flat {
    fn from(cfg: &RunConfig) -> Result<Self> {
        let ser = |v: std::result::Result<Value, serde_json::Error>| v.map_err(|e| Error::Config(e.to_string()));
        let mut model = object(ser(serde_json::to_value(&cfg.model))?);
        let stft = object(model.remove("stft").expect("model has stft"));
        model.remove("vocab_size");
        let mut values = BTreeMap::new();
        for (section, map) in [
            (Section::Stft, stft),
            (Section::Model, model),
            (Section::Train, object(ser(serde_json::to_value(&cfg.train))?)),
            (Section::Run, object(ser(serde_json::to_value(&cfg.run))?)),
        ] {
            for (k, v) in map {
                values.insert(k, (section, v));
            }
        }
        Ok(Self { values })
    }

    fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let (_, slot) = self.values.get_mut(key).ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        *slot = parse_like(slot, raw).map_err(|msg| Error::Config(format!("`{key}`: {msg}")))?;
        Ok(())
    }

    fn build(&self, vocab_size: usize) -> Result<RunConfig> {
        let mut maps: BTreeMap<Section, Map<String, Value>> = BTreeMap::new();
        for (k, (section, v)) in &self.values {
            maps.entry(*section).or_default().insert(k.clone(), v.clone());
        }
        let mut model = maps.remove(&Section::Model).unwrap_or_default();
        model.insert("stft".into(), Value::Object(maps.remove(&Section::Stft).unwrap_or_default()));
        model.insert("vocab_size".into(), Value::from(vocab_size));
        let de = |e: serde_json::Error| Error::Config(e.to_string());
        Ok(RunConfig {
            model: serde_json::from_value(Value::Object(model)).map_err(de)?,
            train: serde_json::from_value(Value::Object(maps.remove(&Section::Train).unwrap_or_default())).map_err(de)?,
            run: serde_json::from_value(Value::Object(maps.remove(&Section::Run).unwrap_or_default())).map_err(de)?,
        })
    }
}

impl PartialOrd for Section {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Section {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (*self as u8).cmp(&(*other as u8))
    }
}

fn parse_like(template: &Value, raw: &str) -> std::result::Result<Value, String> {
    let raw = raw.trim();
    match template {
        Value::Bool(_) => raw.parse::<bool>().map(Value::Bool).map_err(|_| format!("expected true|false, got `{raw}`")),
        Value::Number(n) if n.is_u64() => {
            raw.parse::<u64>().map(Value::from).map_err(|_| format!("expected a non-negative integer, got `{raw}`"))
        }
        Value::Number(_) => raw
            .parse::<f64>()
            .ok()
            .and_then(serde_json::Number::from_f64)
            .map(Value::Number)
            .ok_or_else(|| format!("expected a number, got `{raw}`")),
        Value::Array(items) => {
            let elem = items.first().cloned().unwrap_or(Value::from(0.0));
            if raw.is_empty() {
                return Ok(Value::Array(vec![]));
            }
            raw.split(',').map(|p| parse_like(&elem, p)).collect::<std::result::Result<Vec<_>, _>>().map(Value::Array)
        }
        _ => Ok(Value::String(raw.to_string())),
    }
}

fn value_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(value_text).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

impl RunConfig {
    /// Named preset: `toy` (desk-scale, batch 4) or `full`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self {
                model: ModelConfig::toy(0),
                train: TrainConfig { batch_size: 4, ..TrainConfig::default() },
                run: RunSettings::default(),
            }),
            "full" => Ok(Self {
                model: ModelConfig::full(0),
                train: TrainConfig::default(),
                run: RunSettings { steps: 500_000, checkpoint_every: 10_000, ..RunSettings::default() },
            }),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected toy|full)"))),
        }
    }

    /// Every settable key as `(key, toy value, full value, group)`.
    pub fn describe_keys() -> Vec<KeyInfo> {
        let toy = Flat::from(&Self::preset("toy").expect("toy preset")).expect("serializable");
        let full = Flat::from(&Self::preset("full").expect("full preset")).expect("serializable");
        toy.values
            .iter()
            .map(|(k, (section, v))| KeyInfo {
                key: k.clone(),
                toy: value_text(v),
                full: value_text(&full.values[k].1),
                group: match section {
                    Section::Stft => "audio",
                    Section::Model => "model",
                    Section::Train => "train",
                    Section::Run => "run",
                },
            })
            .collect()
    }

    /// Parses `text` (from `origin`, used for relative paths and includes),
    /// then applies `overrides` in order.
    pub fn parse(text: &str, origin: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut entries = Vec::new();
        let base = collect(text, origin, &mut entries, 0)?;
        let mut flat = Flat::from(&Self::preset(&base.unwrap_or_else(|| "toy".into()))?)?;
        let mut seen = BTreeMap::new();
        for (key, value, line, file) in &entries {
            if let Some(prev) = seen.insert(key.clone(), *line) {
                if file.is_none() {
                    return Err(Error::Config(format!("`{key}` set twice (lines {prev} and {line})")));
                }
            }
            let value = if PATH_KEYS.contains(&key.as_str()) { resolve(value, file.as_deref()) } else { value.clone() };
            flat.set(key, &value).map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        for (k, v) in overrides {
            flat.set(k, v)?;
        }
        let cfg = flat.build(0)?;
        cfg.train.validate()?;
        if !matches!(cfg.run.dtype.as_str(), "f32" | "f64") {
            return Err(Error::Config(format!("dtype must be f32|f64, got `{}`", cfg.run.dtype)));
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, Some(path), overrides)
    }

    /// Model configuration with the vocabulary size filled in, validated.
    pub fn model_for(&self, vocab_size: usize) -> Result<ModelConfig> {
        let m = ModelConfig { vocab_size, ..self.model.clone() };
        m.validate()?;
        Ok(m)
    }

    pub fn dtype(&self) -> candle_core::DType {
        if self.run.dtype == "f64" { candle_core::DType::F64 } else { candle_core::DType::F32 }
    }

    /// Canonical text form; parsing it reproduces this configuration.
    pub fn to_text(&self) -> Result<String> {
        let flat = Flat::from(self)?;
        Ok(flat.values.iter().map(|(k, (_, v))| format!("{k} = {}\n", value_text(v))).collect())
    }
}

fn resolve(value: &str, file: Option<&Path>) -> String {
    let p = Path::new(value);
    match file.and_then(Path::parent) {
        Some(dir) if !value.is_empty() && p.is_relative() => dir.join(p).display().to_string(),
        _ => value.to_string(),
    }
}

type Entry = (String, String, usize, Option<PathBuf>);

/// Collects assignments, expanding file includes depth-first. Returns the
/// preset named by the outermost `include`, if any.
fn collect(text: &str, origin: Option<&Path>, out: &mut Vec<Entry>, depth: usize) -> Result<Option<String>> {
    if depth > 8 {
        return Err(Error::Config("include nesting is too deep".into()));
    }
    let mut preset = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if key == "include" {
            if matches!(value, "toy" | "full") {
                if preset.is_some() || !out.is_empty() {
                    return Err(Error::Config(format!("line {}: a preset include must come first", i + 1)));
                }
                preset = Some(value.to_string());
                continue;
            }
            let path = PathBuf::from(resolve(value, origin));
            let inner = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let start = out.len();
            let nested = collect(&inner, Some(&path), out, depth + 1)?;
            for e in &mut out[start..] {
                e.3.get_or_insert_with(|| path.clone());
            }
            if nested.is_some() {
                if preset.is_some() || start != 0 {
                    return Err(Error::Config(format!("line {}: included file sets a second preset", i + 1)));
                }
                preset = nested;
            }
            continue;
        }
        out.push((key.to_string(), value.to_string(), i + 1, origin.map(Path::to_path_buf)));
    }
    Ok(preset)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_presets() {
        let c = RunConfig::parse("", None, &[]).unwrap();
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.train.lambda_se, 8.0);
        let f = RunConfig::parse("include = full\n", None, &[]).unwrap();
        assert_eq!(f.train.batch_size, 64);
        assert_eq!(f.model.d_latent, 192);
    }

    #[test]
    fn keys_overrides_and_lists() {
        let text = "# comment\nlambda_d = 2.5\nsteps = 10\ndecoder_upsample = 4,8,8\nn_fft = 512\nspeaker_input = spectrogram\n";
        let c = RunConfig::parse(text, None, &[("steps".into(), "12".into())]).unwrap();
        assert_eq!(c.train.lambda_d, 2.5);
        assert_eq!(c.run.steps, 12);
        assert_eq!(c.model.decoder_upsample, vec![4, 8, 8]);
        assert_eq!(c.model.stft.n_fft, 512);
        assert_eq!(c.model.speaker_input, crate::config::SpeakerInput::Spectrogram);
    }

    #[test]
    fn unknown_and_malformed_keys_are_named() {
        let e = RunConfig::parse("lamda_d = 3\n", None, &[]).unwrap_err().to_string();
        assert!(e.contains("lamda_d"), "{e}");
        assert!(RunConfig::parse("steps = -1\n", None, &[]).is_err());
        assert!(RunConfig::parse("just words\n", None, &[]).is_err());
        assert!(RunConfig::parse("steps = 1\nsteps = 2\n", None, &[]).is_err());
        assert!(RunConfig::parse("rho_max = 1.5\n", None, &[]).is_err());
        assert!(RunConfig::parse("vocab_size = 3\n", None, &[]).is_err());
        assert!(RunConfig::parse("speaker_input = mel\n", None, &[]).is_err());
    }

    #[test]
    fn includes_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("base.cfg"), "include = toy\nsteps = 7\nvocab = phonemes.txt\n").unwrap();
        std::fs::write(dir.path().join("run.cfg"), "include = base.cfg\nsteps = 9\n").unwrap();
        let c = RunConfig::load(dir.path().join("run.cfg"), &[]).unwrap();
        assert_eq!(c.run.steps, 9);
        assert_eq!(PathBuf::from(&c.run.vocab), dir.path().join("phonemes.txt"));
    }

    #[test]
    fn text_form_round_trips() {
        let c = RunConfig::parse("lambda_se = 3\nsweep_lengths = 1,2\n", None, &[]).unwrap();
        assert_eq!(RunConfig::parse(&c.to_text().unwrap(), None, &[]).unwrap(), c);
        let keys = RunConfig::describe_keys();
        let get = |k: &str| keys.iter().find(|e| e.key == k).unwrap().clone();
        assert_eq!(get("learning_rate").toy, "0.0002");
        assert_eq!(get("lr_decay").full, "0.999875");
        assert_eq!(get("beta1").toy, "0.8");
        assert_eq!(get("lambda_d").full, "8.0");
        assert_eq!(get("batch_size").full, "64");
        assert_eq!(get("batch_size").toy, "4");
    }
}
