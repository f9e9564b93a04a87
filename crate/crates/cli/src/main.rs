use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use voxflow::audio::batch::Dataset;
use voxflow::audio::manifest::{load_manifest, UtteranceRecord};
use voxflow::audio::Waveform;
use voxflow::candle_core::Device;
use voxflow::eval::{
    emit_embedding_plot_data, reference_length_sweep, sweep_records, wer_hook, Embedder, ExternalEmbedder, SweepItem,
};
use voxflow::fixture::{write_fixture, FixtureSpec};
use voxflow::model::Model;
use voxflow::phoneme::Vocabulary;
use voxflow::pipeline::Synthesizer;
use voxflow::runconfig::RunConfig;
use voxflow::train::{load_checkpoint, read_metrics, save_checkpoint, MetricsLog, Trainer};

const VOCAB_FILE: &str = "phonemes.txt";

#[derive(Parser)]
#[command(name = "voxflow", version, about = "Zero-shot speaker-adaptive TTS and voice conversion")]
#[command(after_long_help = config_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file, optionally resuming a checkpoint.
    #[command(after_long_help = config_help())]
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint to resume from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Synthesize speech for a phoneme sequence in the voice of a reference.
    Tts(TtsArgs),
    /// Convert a source utterance to the voice of a reference.
    Vc(VcArgs),
    /// Speaker similarity, reference-length sweep and WER over an eval manifest.
    Eval(EvalArgs),
    /// Reference-length sweep only.
    Sweep {
        #[command(flatten)]
        common: EvalCommon,
        /// Comma-separated reference lengths in seconds.
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<f64>>,
    },
    /// Print a checkpoint summary or a merged config.
    Inspect {
        /// Checkpoint (`.ckpt`/`.safetensors`) or config file.
        path: PathBuf,
        #[arg(long = "set", value_parser = parse_kv)]
        overrides: Vec<(String, String)>,
    },
    /// Write the synthetic two-speaker corpus and a toy config.
    MakeFixture {
        dir: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set steps=10`.
    #[arg(long = "set", value_parser = parse_kv)]
    overrides: Vec<(String, String)>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Phoneme inventory; defaults to `phonemes.txt` beside the checkpoint.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Prior sampling temperature.
    #[arg(long, default_value_t = voxflow::pipeline::DEFAULT_TEMPERATURE)]
    temperature: f64,
}

#[derive(Args)]
struct TtsArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Space-separated phoneme symbols.
    #[arg(long, conflicts_with_all = ["phoneme_file", "batch"])]
    phonemes: Option<String>,
    /// File holding the phoneme sequence.
    #[arg(long, conflicts_with = "batch")]
    phoneme_file: Option<PathBuf>,
    #[arg(long, required_unless_present = "batch")]
    reference: Option<PathBuf>,
    #[arg(long, required_unless_present = "batch")]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Global duration factor.
    #[arg(long, default_value_t = 1.0)]
    pace: f64,
    /// Requests, one per line: `phonemes|reference.wav|out.wav[|seed[|pace]]`.
    #[arg(long)]
    batch: Option<PathBuf>,
}

#[derive(Args)]
struct VcArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, required_unless_present = "batch")]
    source: Option<PathBuf>,
    #[arg(long, required_unless_present = "batch")]
    reference: Option<PathBuf>,
    #[arg(long, required_unless_present = "batch")]
    out: Option<PathBuf>,
    /// Requests, one per line: `source.wav|reference.wav|out.wav`.
    #[arg(long, conflicts_with_all = ["source", "reference", "out"])]
    batch: Option<PathBuf>,
}

#[derive(Args)]
struct EvalCommon {
    #[command(flatten)]
    model: ModelArgs,
    /// Eval manifest; defaults to `eval_manifest` from the config.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Config supplying external commands, sweep lengths and paths.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_parser = parse_kv)]
    overrides: Vec<(String, String)>,
    /// Directory for result files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: EvalCommon,
    #[arg(long)]
    smcs: bool,
    #[arg(long)]
    sweep: bool,
    #[arg(long)]
    wer: bool,
    /// 2-D projection of per-utterance speaker embeddings.
    #[arg(long)]
    plot: bool,
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn config_help() -> String {
    let mut s = String::from("Config keys (toy preset / full preset):\n");
    for k in RunConfig::describe_keys() {
        let _ = writeln!(s, "  {:<24} {:<24} {:<24} [{}]", k.key, k.toy, k.full, k.group);
    }
    s.push_str("\nExit codes: 0 success, 1 usage or config error, 2 runtime failure.");
    s
}

/// Usage problems exit with 1, everything else with 2.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<voxflow::Error> for Failure {
    fn from(e: voxflow::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train { cfg, resume } => train(&cfg, resume.as_deref()),
        Command::Tts(a) => tts(&a),
        Command::Vc(a) => vc(&a),
        Command::Eval(a) => {
            let any = a.smcs || a.sweep || a.wer || a.plot;
            eval(&a.common, a.smcs || !any, a.sweep, a.wer, a.plot, None)
        }
        Command::Sweep { common, lengths } => eval(&common, false, true, false, false, lengths),
        Command::Inspect { path, overrides } => inspect(&path, &overrides),
        Command::MakeFixture { dir } => make_fixture(&dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: &Path, overrides: &[(String, String)]) -> Result<RunConfig, Failure> {
    RunConfig::load(path, overrides).with_context(|| format!("loading {}", path.display())).map_err(usage)
}

fn require(value: &str, key: &str) -> Result<PathBuf, Failure> {
    if value.is_empty() {
        return Err(usage(anyhow!("config key `{key}` is not set")));
    }
    Ok(PathBuf::from(value))
}

fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:08}.ckpt"))
}

fn train(args: &ConfigArgs, resume: Option<&Path>) -> Result<(), Failure> {
    let rc = load_config(&args.config, &args.overrides)?;
    let vocab_path = require(&rc.run.vocab, "vocab")?;
    let manifest = require(&rc.run.train_manifest, "train_manifest")?;
    let out = PathBuf::from(&rc.run.output_dir);
    let vocab = Vocabulary::load(&vocab_path).context("loading vocabulary")?;
    let records = load_manifest(&manifest).context("loading train manifest")?;
    let device = Device::Cpu;

    let (mut trainer, ds) = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path, &device).with_context(|| format!("loading {}", path.display()))?;
            if ckpt.model_config.vocab_size != vocab.len() {
                return Err(usage(anyhow!(
                    "checkpoint expects {} phonemes, vocabulary has {}",
                    ckpt.model_config.vocab_size,
                    vocab.len()
                )));
            }
            let ds = Dataset::load(records, &vocab, ckpt.model_config.stft)?;
            (ckpt.trainer(rc.dtype(), &device)?, ds)
        }
        None => {
            let model_cfg = rc.model_for(vocab.len()).map_err(usage)?;
            let ds = Dataset::load(records, &vocab, model_cfg.stft)?;
            let model = Model::new(model_cfg, rc.train.seed, rc.dtype(), &device)?;
            (Trainer::new(model, rc.train.clone(), ds.steps_per_epoch(rc.train.batch_size))?, ds)
        }
    };

    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    vocab.save(out.join(VOCAB_FILE))?;
    let metrics_path = out.join("metrics.jsonl");
    if resume.is_some() && metrics_path.exists() {
        let kept: Vec<_> = read_metrics(&metrics_path)?.into_iter().filter(|r| r.step <= trainer.step()).collect();
        let mut log = MetricsLog::open(&metrics_path, false)?;
        for r in &kept {
            log.write(r)?;
        }
    }
    let mut log = MetricsLog::open(&metrics_path, resume.is_some())?;
    let remaining = rc.run.steps.saturating_sub(trainer.step());
    log::info!("training steps {}..{} into {}", trainer.step() + 1, rc.run.steps, out.display());
    let every = rc.run.checkpoint_every;
    trainer.run(&ds, remaining, |t, report| {
        log.write(report)?;
        if report.step % 50 == 0 {
            log::info!("step {} recon {:.4} kl {:.4} dur {:.4}", report.step, report.recon, report.kl_prior, report.duration);
        }
        if every > 0 && t.step() % every == 0 && t.step() < rc.run.steps {
            save_checkpoint(t, checkpoint_path(&out, t.step()))?;
        }
        Ok(())
    })?;
    let final_path = checkpoint_path(&out, trainer.step());
    save_checkpoint(&trainer, &final_path)?;
    log::info!("wrote {}", final_path.display());
    Ok(())
}

fn synthesizer(args: &ModelArgs) -> anyhow::Result<Synthesizer> {
    let device = Device::Cpu;
    let ckpt = load_checkpoint(&args.checkpoint, &device)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let vocab_path = args
        .vocab
        .clone()
        .unwrap_or_else(|| args.checkpoint.parent().unwrap_or(Path::new(".")).join(VOCAB_FILE));
    let vocab = Vocabulary::load(&vocab_path).with_context(|| format!("loading {}", vocab_path.display()))?;
    let dtype = ckpt.tensors.values().next().map(|t| t.dtype()).unwrap_or(voxflow::candle_core::DType::F32);
    let mut synth = Synthesizer::new(ckpt.model(dtype, &device)?, vocab)?;
    if !(args.temperature >= 0.0) {
        bail!("temperature must be non-negative");
    }
    synth.temperature = args.temperature;
    Ok(synth)
}

fn read_wav(path: &Path) -> anyhow::Result<Waveform> {
    Waveform::read_wav(path).with_context(|| format!("reading {}", path.display()))
}

fn write_wav(w: &Waveform, path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    w.write_wav(path).with_context(|| format!("writing {}", path.display()))
}

/// Non-empty, non-comment lines of a batch file split on `|`, with
/// line numbers.
fn batch_lines(path: &Path) -> anyhow::Result<Vec<(usize, Vec<String>)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| (i + 1, l.split('|').map(|f| f.trim().to_string()).collect()))
        .collect())
}

fn relative_to(base: &Path, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    if p.is_relative() {
        base.parent().unwrap_or(Path::new(".")).join(p)
    } else {
        p
    }
}

fn tts(a: &TtsArgs) -> Result<(), Failure> {
    let mut jobs: Vec<(Vec<String>, PathBuf, PathBuf, u64, f64)> = Vec::new();
    if let Some(batch) = &a.batch {
        for (line, f) in batch_lines(batch)? {
            if !(3..=5).contains(&f.len()) {
                return Err(usage(anyhow!("{}:{line}: expected phonemes|reference|out[|seed[|pace]]", batch.display())));
            }
            let seed = f.get(3).map(|s| s.parse()).transpose().map_err(|_| usage(anyhow!("{}:{line}: bad seed", batch.display())))?;
            let pace = f.get(4).map(|s| s.parse()).transpose().map_err(|_| usage(anyhow!("{}:{line}: bad pace", batch.display())))?;
            jobs.push((
                f[0].split_whitespace().map(String::from).collect(),
                relative_to(batch, &f[1]),
                relative_to(batch, &f[2]),
                seed.unwrap_or(a.seed),
                pace.unwrap_or(a.pace),
            ));
        }
    } else {
        let phonemes = match (&a.phonemes, &a.phoneme_file) {
            (Some(p), _) => p.clone(),
            (None, Some(f)) => std::fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?,
            (None, None) => return Err(usage(anyhow!("one of --phonemes, --phoneme-file or --batch is required"))),
        };
        let (reference, out) = (a.reference.clone().expect("required"), a.out.clone().expect("required"));
        jobs.push((phonemes.split_whitespace().map(String::from).collect(), reference, out, a.seed, a.pace));
    }
    let synth = synthesizer(&a.model)?;
    for (phonemes, reference, out, seed, pace) in jobs {
        let reference_audio = read_wav(&reference)?;
        let result = synth.tts(&phonemes, &reference_audio, pace, seed)?;
        write_wav(&result.waveform, &out)?;
        let frames: usize = result.durations.iter().sum();
        println!("{}\t{frames} frames\t{} samples", out.display(), result.waveform.len());
    }
    Ok(())
}

fn vc(a: &VcArgs) -> Result<(), Failure> {
    let jobs: Vec<(PathBuf, PathBuf, PathBuf)> = match &a.batch {
        Some(batch) => batch_lines(batch)?
            .into_iter()
            .map(|(line, f)| match f.as_slice() {
                [s, r, o] => Ok((relative_to(batch, s), relative_to(batch, r), relative_to(batch, o))),
                _ => Err(usage(anyhow!("{}:{line}: expected source|reference|out", batch.display()))),
            })
            .collect::<Result<_, _>>()?,
        None => vec![(
            a.source.clone().expect("required"),
            a.reference.clone().expect("required"),
            a.out.clone().expect("required"),
        )],
    };
    let synth = synthesizer(&a.model)?;
    for (source, reference, out) in jobs {
        let w = synth.vc(&read_wav(&source)?, &read_wav(&reference)?)?;
        write_wav(&w, &out)?;
        println!("{}\t{} samples", out.display(), w.len());
    }
    Ok(())
}

/// Pairs every eval utterance with a reference: the next utterance of the
/// same speaker in manifest order, wrapping around.
fn eval_items(records: &[UtteranceRecord]) -> anyhow::Result<Vec<(SweepItem, String)>> {
    let mut by_speaker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_speaker.entry(&r.speaker_id).or_default().push(i);
    }
    let mut audio = Vec::with_capacity(records.len());
    for r in records {
        audio.push(read_wav(&r.audio_path)?);
    }
    let mut items = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let group = &by_speaker[r.speaker_id.as_str()];
        if group.len() < 2 {
            log::warn!("speaker {} has a single eval utterance; {} is skipped", r.speaker_id, r.id());
            continue;
        }
        let pos = group.iter().position(|&j| j == i).expect("member of its group");
        let ref_idx = group[(pos + 1) % group.len()];
        items.push((
            SweepItem {
                id: r.id(),
                phonemes: r.phonemes.clone(),
                target: audio[i].clone(),
                reference: audio[ref_idx].clone(),
            },
            r.speaker_id.clone(),
        ));
    }
    if items.is_empty() {
        bail!("no evaluable utterances: every speaker needs at least two");
    }
    Ok(items)
}

fn eval(
    c: &EvalCommon,
    do_smcs: bool,
    do_sweep: bool,
    do_wer: bool,
    do_plot: bool,
    lengths: Option<Vec<f64>>,
) -> Result<(), Failure> {
    let rc = match &c.config {
        Some(p) => load_config(p, &c.overrides)?,
        None => {
            let mut rc = RunConfig::preset("toy").map_err(usage)?;
            if !c.overrides.is_empty() {
                rc = RunConfig::parse(&rc.to_text().map_err(usage)?, None, &c.overrides).map_err(usage)?;
            }
            rc
        }
    };
    if do_wer && rc.run.asr_command.trim().is_empty() {
        return Err(usage(anyhow!("--wer needs the `asr_command` config key")));
    }
    let manifest = match &c.manifest {
        Some(m) => m.clone(),
        None => require(&rc.run.eval_manifest, "eval_manifest")?,
    };
    let records = load_manifest(&manifest).context("loading eval manifest")?;
    let synth = synthesizer(&c.model)?;
    let external;
    let embedder: &dyn Embedder = if rc.run.embedder_command.trim().is_empty() {
        &synth
    } else {
        external = ExternalEmbedder { template: rc.run.embedder_command.clone() };
        &external
    };
    let mut items = eval_items(&records)?;
    if rc.run.normalize_volume {
        for (item, _) in &mut items {
            item.target = item.target.normalized(0.95);
            item.reference = item.reference.normalized(0.95);
        }
    }
    let plain: Vec<SweepItem> = items.iter().map(|(i, _)| i.clone()).collect();
    std::fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;

    if do_smcs {
        let full = plain.iter().map(|i| i.reference.duration_s()).fold(f64::INFINITY, f64::min);
        let rows = reference_length_sweep(&synth, &plain, &[full], embedder, c.seed)?;
        let res = rows[0].result.as_ref().ok_or_else(|| anyhow!("no pairs were scored"))?;
        std::fs::write(c.out.join("smcs.tsv"), res.to_records())?;
        println!("smcs mean {:.4} over {} pairs", res.mean, res.pairs.len());
    }
    if do_sweep {
        let lengths = lengths.unwrap_or_else(|| rc.run.sweep_lengths.clone());
        let rows = reference_length_sweep(&synth, &plain, &lengths, embedder, c.seed)?;
        let table = sweep_records(&rows);
        std::fs::write(c.out.join("sweep.tsv"), &table)?;
        print!("{table}");
    }
    if do_wer {
        let mut expected = Vec::new();
        let mut audio = Vec::new();
        for item in &plain {
            expected.push(item.phonemes.join(" "));
            audio.push(synth.tts(&item.phonemes, &item.reference, rc.run.pace, c.seed)?.waveform);
        }
        let wer = wer_hook(&expected, &audio, &rc.run.asr_command)?;
        std::fs::write(c.out.join("wer.txt"), format!("{wer:.6}\n"))?;
        println!("wer {wer:.4}");
    }
    if do_plot {
        let mut labeled = Vec::new();
        for (item, speaker) in &items {
            labeled.push((format!("{speaker}/{}", item.id), embedder.embed(&item.target)?));
        }
        emit_embedding_plot_data(&labeled, c.out.join("embeddings.tsv"))?;
        println!("wrote {}", c.out.join("embeddings.tsv").display());
    }
    Ok(())
}

fn inspect(path: &Path, overrides: &[(String, String)]) -> Result<(), Failure> {
    let is_ckpt = matches!(path.extension().and_then(|e| e.to_str()), Some("ckpt" | "safetensors"));
    if !is_ckpt {
        print!("{}", load_config(path, overrides)?.to_text()?);
        return Ok(());
    }
    let ckpt = load_checkpoint(path, &Device::Cpu).with_context(|| format!("loading {}", path.display()))?;
    let params: usize =
        ckpt.tensors.iter().filter(|(k, _)| k.starts_with("param/")).map(|(_, t)| t.elem_count()).sum();
    println!("step\t{}", ckpt.step);
    println!("steps_per_epoch\t{}", ckpt.steps_per_epoch);
    println!("optimizer_steps\t{},{}", ckpt.optimizer_steps.0, ckpt.optimizer_steps.1);
    println!("parameters\t{params}");
    println!("model_config\t{}", serde_json::to_string(&ckpt.model_config).map_err(anyhow::Error::from)?);
    println!("train_config\t{}", serde_json::to_string(&ckpt.train_config).map_err(anyhow::Error::from)?);
    Ok(())
}

fn make_fixture(dir: &Path) -> Result<(), Failure> {
    let paths = write_fixture(dir, &FixtureSpec::default())?;
    let cfg = dir.join("toy.cfg");
    std::fs::write(
        &cfg,
        "include = toy\ntrain_manifest = train.txt\neval_manifest = eval.txt\nvocab = phonemes.txt\noutput_dir = run\nsteps = 2000\n",
    )
    .with_context(|| format!("writing {}", cfg.display()))?;
    println!("{}", paths.train_manifest.display());
    println!("{}", paths.eval_manifest.display());
    println!("{}", cfg.display());
    Ok(())
}
