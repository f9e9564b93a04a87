//! Speaker-similarity scoring, the reference-length sweep, word error rate
//! through an external recognizer, and 2-D projections of embeddings.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::pipeline::Synthesizer;

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Maps a waveform to a fixed-size speaker vector.
pub trait Embedder {
    fn embed(&self, w: &Waveform) -> Result<Vec<f64>>;
}

impl Embedder for Synthesizer {
    fn embed(&self, w: &Waveform) -> Result<Vec<f64>> {
        Synthesizer::embed(self, w)
    }
}

/// Runs a shell command template per file; `{wav}` is replaced by the path.
/// The command must print whitespace-separated numbers on stdout.
pub struct ExternalEmbedder {
    pub template: String,
}

impl Embedder for ExternalEmbedder {
    fn embed(&self, w: &Waveform) -> Result<Vec<f64>> {
        let scratch = Scratch::new()?;
        let path = scratch.write(w, 0)?;
        let out = run_template(&self.template, &path)?;
        out.split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| Error::External(format!("embedder printed non-numeric `{t}`"))))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityResult {
    pub pairs: Vec<(String, f64)>,
    pub mean: f64,
    /// Half-width of the normal-approximation 95% interval; `None` for a
    /// single pair.
    pub ci95: Option<f64>,
}

impl SimilarityResult {
    pub fn from_pairs(pairs: Vec<(String, f64)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("no pairs to score".into()));
        }
        let n = pairs.len() as f64;
        let mean = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        let ci95 = (pairs.len() > 1).then(|| {
            let var = pairs.iter().map(|p| (p.1 - mean).powi(2)).sum::<f64>() / (n - 1.0);
            1.96 * var.sqrt() / n.sqrt()
        });
        Ok(Self { pairs, mean, ci95 })
    }

    /// Tab-separated rows `id cosine`, then `mean` and `ci95`.
    pub fn to_records(&self) -> String {
        let mut s: String = self.pairs.iter().map(|(id, c)| format!("{id}\t{c:.6}\n")).collect();
        s += &format!("mean\t{:.6}\n", self.mean);
        s += &match self.ci95 {
            Some(c) => format!("ci95\t{c:.6}\n"),
            None => "ci95\tdegenerate\n".to_string(),
        };
        s
    }
}

/// Cosine between the embeddings of each synthesized/reference pair.
pub fn smcs(ids: &[String], synth: &[Waveform], refs: &[Waveform], embedder: &dyn Embedder) -> Result<SimilarityResult> {
    if synth.len() != refs.len() || ids.len() != synth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} ids, {} synthesized and {} reference files",
            ids.len(),
            synth.len(),
            refs.len()
        )));
    }
    let pairs = ids
        .iter()
        .zip(synth.iter().zip(refs))
        .map(|(id, (a, b))| Ok((id.clone(), cosine_similarity(&embedder.embed(a)?, &embedder.embed(b)?)?)))
        .collect::<Result<Vec<_>>>()?;
    SimilarityResult::from_pairs(pairs)
}

/// One evaluation utterance: the text to speak, a held-out recording of the
/// target speaker to compare against, and the reference prompt.
#[derive(Debug, Clone)]
pub struct SweepItem {
    pub id: String,
    pub phonemes: Vec<String>,
    pub target: Waveform,
    pub reference: Waveform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub seconds: f64,
    pub result: Option<SimilarityResult>,
    pub skipped: usize,
}

/// TTS with each reference trimmed to every requested length, scored
/// against the item's target recording.
pub fn reference_length_sweep(
    synth: &Synthesizer,
    items: &[SweepItem],
    lengths: &[f64],
    embedder: &dyn Embedder,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if let Some(l) = lengths.iter().find(|l| !(**l > 0.0)) {
        return Err(Error::InvalidArgument(format!("reference length must be positive, got {l}")));
    }
    lengths
        .iter()
        .map(|&seconds| {
            let mut ids = Vec::new();
            let mut outs = Vec::new();
            let mut targets = Vec::new();
            let mut skipped = 0;
            for item in items {
                let reference = match item.reference.trim_to(seconds) {
                    Ok(r) => r,
                    Err(Error::TooShort(msg)) => {
                        log::warn!("skipping {} at {seconds} s: {msg}", item.id);
                        skipped += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                outs.push(synth.tts(&item.phonemes, &reference, 1.0, seed)?.waveform);
                targets.push(item.target.clone());
                ids.push(item.id.clone());
            }
            let result = if ids.is_empty() { None } else { Some(smcs(&ids, &outs, &targets, embedder)?) };
            Ok(SweepRow { seconds, result, skipped })
        })
        .collect()
}

/// Tab-separated `seconds mean ci95 n skipped` rows with a header.
pub fn sweep_records(rows: &[SweepRow]) -> String {
    let mut s = String::from("seconds\tmean\tci95\tn\tskipped\n");
    for r in rows {
        match &r.result {
            Some(res) => {
                let ci = res.ci95.map(|c| format!("{c:.6}")).unwrap_or_else(|| "degenerate".into());
                s += &format!("{}\t{:.6}\t{ci}\t{}\t{}\n", r.seconds, res.mean, res.pairs.len(), r.skipped)
            }
            None => s += &format!("{}\tnan\tnan\t0\t{}\n", r.seconds, r.skipped),
        }
    }
    s
}

fn levenshtein(a: &[&str], b: &[&str]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Word-level edit distance divided by the number of expected words.
pub fn word_error_rate(expected: &str, hypothesis: &str) -> Result<f64> {
    let e: Vec<&str> = expected.split_whitespace().collect();
    if e.is_empty() {
        return Err(Error::InvalidArgument("expected transcript is empty".into()));
    }
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    Ok(levenshtein(&e, &h) as f64 / e.len() as f64)
}

struct Scratch(PathBuf);

impl Scratch {
    fn new() -> Result<Self> {
        use std::sync::atomic::{AtomicU64, Ordering};
        static COUNTER: AtomicU64 = AtomicU64::new(0);
        let dir = std::env::temp_dir()
            .join(format!("voxflow-{}-{}", std::process::id(), COUNTER.fetch_add(1, Ordering::Relaxed)));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self(dir))
    }

    fn write(&self, w: &Waveform, i: usize) -> Result<PathBuf> {
        let p = self.0.join(format!("{i:05}.wav"));
        w.write_wav(&p)?;
        Ok(p)
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn run_template(template: &str, wav: &Path) -> Result<String> {
    let cmd = template.replace("{wav}", &wav.display().to_string());
    let out = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .output()
        .map_err(|e| Error::External(format!("could not run `{cmd}`: {e}")))?;
    if !out.status.success() {
        return Err(Error::External(format!(
            "`{cmd}` exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

/// Transcribes each waveform with the external recognizer and returns the
/// corpus WER (total edits over total expected words).
pub fn wer_hook(expected: &[String], audio: &[Waveform], asr_template: &str) -> Result<f64> {
    if expected.len() != audio.len() {
        return Err(Error::InvalidArgument(format!("{} transcripts for {} files", expected.len(), audio.len())));
    }
    if asr_template.trim().is_empty() {
        return Err(Error::Config("asr_command is not configured".into()));
    }
    let scratch = Scratch::new()?;
    let (mut edits, mut words) = (0.0, 0usize);
    for (i, (text, w)) in expected.iter().zip(audio).enumerate() {
        let path = scratch.write(w, i)?;
        let hyp = run_template(asr_template, &path)?;
        let n = text.split_whitespace().count();
        edits += word_error_rate(text, &hyp)? * n as f64;
        words += n;
    }
    Ok(edits / words as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotPoint {
    pub label: String,
    pub x: f64,
    pub y: f64,
}

/// Projection onto the top two principal components. Returns the points and
/// whether the input was degenerate (all vectors identical).
pub fn pca_2d(vectors: &[Vec<f64>]) -> Result<(Vec<[f64; 2]>, bool)> {
    if vectors.len() < 2 {
        return Err(Error::InvalidArgument("need at least two embeddings".into()));
    }
    let d = vectors[0].len();
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Shape("embeddings must share a non-zero dimension".into()));
    }
    let n = vectors.len();
    let x = DMatrix::from_fn(n, d, |i, j| vectors[i][j]);
    let mean = x.row_mean();
    let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / (n as f64 - 1.0).max(1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let degenerate = centred.iter().all(|v| *v == 0.0);
    let mut axes = Vec::with_capacity(2);
    for k in 0..2 {
        if k >= d || eig.eigenvalues[order[k]] <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
            axes.push(None);
            continue;
        }
        let mut v = eig.eigenvectors.column(order[k]).clone_owned();
        let pivot = v.iter().copied().fold(0.0f64, |m, c| if c.abs() > m.abs() { c } else { m });
        if pivot < 0.0 {
            v = -v;
        }
        axes.push(Some(v));
    }
    let points = (0..n)
        .map(|i| {
            let row = centred.row(i);
            let proj = |a: &Option<nalgebra::DVector<f64>>| a.as_ref().map(|v| row.dot(&v.transpose())).unwrap_or(0.0);
            [proj(&axes[0]), proj(&axes[1])]
        })
        .collect();
    Ok((points, degenerate))
}

/// Writes `label x y` rows for the 2-D projection of `embeddings`.
pub fn emit_embedding_plot_data(embeddings: &[(String, Vec<f64>)], out_path: impl AsRef<Path>) -> Result<Vec<PlotPoint>> {
    let vectors: Vec<Vec<f64>> = embeddings.iter().map(|e| e.1.clone()).collect();
    let (coords, degenerate) = pca_2d(&vectors)?;
    if degenerate {
        log::warn!("all embeddings are identical; every point is at the origin");
    }
    let points: Vec<PlotPoint> = embeddings
        .iter()
        .zip(coords)
        .map(|((label, _), [x, y])| PlotPoint { label: label.clone(), x, y })
        .collect();
    let path = out_path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "label\tx\ty").map_err(|e| Error::io(path, e))?;
    for p in &points {
        writeln!(f, "{}\t{:.6}\t{:.6}", p.label, p.x, p.y).map_err(|e| Error::io(path, e))?;
    }
    Ok(points)
}
