//! Line-delimited corpus manifests.
//!
//! One record per line: `audio_path|speaker_id|phonemes[|duration_s]`, where
//! `phonemes` is a space-separated symbol string. Relative audio paths resolve
//! against the manifest's directory. Blank lines and `#` comments are skipped.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub audio_path: PathBuf,
    pub speaker_id: String,
    pub phonemes: Vec<String>,
    /// 0.0 when the manifest does not carry a duration.
    pub duration_s: f64,
}

impl UtteranceRecord {
    /// Stable identifier: the audio file stem.
    pub fn id(&self) -> String {
        self.audio_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    }

    pub fn to_line(&self) -> String {
        let mut line = format!(
            "{}|{}|{}",
            self.audio_path.display(),
            self.speaker_id,
            self.phonemes.join(" ")
        );
        if self.duration_s > 0.0 {
            line.push_str(&format!("|{:.4}", self.duration_s));
        }
        line
    }
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<UtteranceRecord>> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let err = |line: usize, msg: &str| Error::Manifest { path: path.to_path_buf(), line, msg: msg.into() };
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('|').map(str::trim).collect();
        if fields.len() < 3 || fields.len() > 4 {
            return Err(err(line_no, "expected audio_path|speaker_id|phonemes[|duration_s]"));
        }
        if fields[0].is_empty() {
            return Err(err(line_no, "missing audio_path"));
        }
        if fields[1].is_empty() {
            return Err(err(line_no, "missing speaker_id"));
        }
        let duration_s = match fields.get(3) {
            Some(d) => d
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .ok_or_else(|| err(line_no, "duration_s must be a non-negative number"))?,
            None => 0.0,
        };
        let audio = PathBuf::from(fields[0]);
        records.push(UtteranceRecord {
            audio_path: if audio.is_absolute() { audio } else { base.join(audio) },
            speaker_id: fields[1].to_string(),
            phonemes: fields[2].split_whitespace().map(str::to_string).collect(),
            duration_s,
        });
    }
    if records.is_empty() {
        return Err(err(0, "manifest has no records"));
    }
    Ok(records)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<UtteranceRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}

/// Records grouped by speaker (speaker ids in sorted order).
#[derive(Debug, Clone)]
pub struct SpeakerIndex {
    records: Vec<UtteranceRecord>,
    by_speaker: BTreeMap<String, Vec<usize>>,
}

impl SpeakerIndex {
    pub fn new(records: Vec<UtteranceRecord>) -> Self {
        let mut by_speaker: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            by_speaker.entry(r.speaker_id.clone()).or_default().push(i);
        }
        Self { records, by_speaker }
    }

    pub fn records(&self) -> &[UtteranceRecord] {
        &self.records
    }

    pub fn speakers(&self) -> impl Iterator<Item = &str> {
        self.by_speaker.keys().map(String::as_str)
    }

    pub fn utterances_of(&self, speaker: &str) -> Result<&[usize]> {
        self.by_speaker
            .get(speaker)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownSpeaker(speaker.to_string()))
    }

    /// Uniformly draws an utterance of `speaker`, excluding `gt` whenever the
    /// speaker has another utterance. Returns the record index.
    pub fn sample_reference<R: Rng + ?Sized>(
        &self,
        speaker: &str,
        gt: Option<usize>,
        rng: &mut R,
    ) -> Result<usize> {
        let pool = self.utterances_of(speaker)?;
        match gt.filter(|g| pool.len() >= 2 && pool.contains(g)) {
            Some(g) => {
                let pick = rng.random_range(0..pool.len() - 1);
                let candidates = pool.iter().filter(|&&i| i != g);
                Ok(*candidates.clone().nth(pick).expect("pool has another utterance"))
            }
            None => Ok(pool[rng.random_range(0..pool.len())]),
        }
    }
}
