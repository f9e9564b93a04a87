use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const HOP: usize = 256;

fn voxflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxflow")).args(args).env("RUST_LOG", "warn").output().expect("spawn voxflow")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "exit {:?}\n{}", o.status.code(), stderr(&o));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Trained {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    checkpoint: PathBuf,
}

/// Fixture plus a 10-step run with a checkpoint at step 5, shared by all tests.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(voxflow(&["make-fixture", s(&root)]));
        let config = root.join("toy.cfg");
        ok(voxflow(&["train", "--config", s(&config), "--set", "steps=10", "--set", "checkpoint_every=5"]));
        let checkpoint = root.join("run/step-00000010.ckpt");
        Trained { _dir: dir, root, config, checkpoint }
    })
}

fn wav_len(path: &Path) -> usize {
    hound::WavReader::open(path).unwrap().len() as usize
}

#[test]
fn help_lists_config_keys_with_defaults() {
    let out = ok(voxflow(&["--help"]));
    for (key, value) in [
        ("learning_rate", "0.0002"),
        ("lr_decay", "0.999875"),
        ("beta1", "0.8"),
        ("beta2", "0.99"),
        ("weight_decay", "0.01"),
        ("lambda_se", "8.0"),
        ("lambda_d", "8.0"),
        ("rho_min", "0.2"),
        ("rho_max", "0.4"),
        ("sample_rate", "22050"),
        ("n_fft", "1024"),
        ("hop", "256"),
        ("win", "1024"),
        ("mel_bins", "80"),
        ("batch_size", "64"),
    ] {
        let line = out.lines().find(|l| l.split_whitespace().next() == Some(key)).unwrap_or_else(|| panic!("{key} missing"));
        assert!(line.split_whitespace().any(|t| t == value), "{key}: {line}");
    }
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(voxflow(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(voxflow(&["tts", "--checkpoint", "x.ckpt"]).status.code(), Some(1));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "include = toy\nlamda_se = 8\n").unwrap();
    let o = voxflow(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lamda_se"), "{}", stderr(&o));
    let o = voxflow(&["train", "--config", s(&cfg), "--set", "nope=1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_writes_checkpoint_and_metrics() {
    let t = trained();
    assert!(t.checkpoint.exists());
    assert!(t.root.join("run/step-00000005.ckpt").exists());
    let metrics = std::fs::read_to_string(t.root.join("run/metrics.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 10);
    assert_eq!(rows[0]["step"], 1);
    assert_eq!(rows[9]["step"], 10);
    let info = ok(voxflow(&["inspect", s(&t.checkpoint)]));
    assert!(info.lines().any(|l| l == "step\t10"), "{info}");
}

#[test]
fn resume_continues_the_unbroken_run() {
    let t = trained();
    let out = t.root.join("resumed");
    let mid = t.root.join("run/step-00000005.ckpt");
    let set_out = format!("output_dir={}", s(&out));
    ok(voxflow(&["train", "--config", s(&t.config), "--set", "steps=10", "--set", &set_out, "--resume", s(&mid)]));
    let resumed = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let unbroken = std::fs::read_to_string(t.root.join("run/metrics.jsonl")).unwrap();
    let tail: Vec<&str> = unbroken.lines().skip(5).collect();
    assert_eq!(resumed.lines().collect::<Vec<_>>(), tail);
    assert!(resumed.lines().next().unwrap().contains("\"step\":6"));
}

#[test]
fn tts_writes_wav_of_predicted_length_and_is_reproducible() {
    let t = trained();
    let reference = t.root.join("wavs/spk_b_04.wav");
    let (a, b) = (t.root.join("tts_a.wav"), t.root.join("tts_b.wav"));
    let args = |out: &Path| {
        ["tts", "--checkpoint", s(&t.checkpoint), "--phonemes", "sil m a n i sil", "--reference", s(&reference), "--out", s(out), "--seed", "3"]
            .map(String::from)
            .to_vec()
    };
    let stdout = ok(Command::new(env!("CARGO_BIN_EXE_voxflow")).args(args(&a)).output().unwrap());
    ok(Command::new(env!("CARGO_BIN_EXE_voxflow")).args(args(&b)).output().unwrap());
    let frames: usize = stdout.split('\t').nth(1).unwrap().trim_end_matches(" frames").parse().unwrap();
    assert_eq!(wav_len(&a), frames * HOP);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn tts_missing_reference_fails_at_runtime() {
    let t = trained();
    let o = voxflow(&[
        "tts", "--checkpoint", s(&t.checkpoint), "--phonemes", "a", "--reference", "/nonexistent.wav", "--out",
        s(&t.root.join("never.wav")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!t.root.join("never.wav").exists());
}

#[test]
fn batch_files_serve_several_requests() {
    let t = trained();
    let batch = t.root.join("requests.txt");
    std::fs::write(&batch, "# phonemes|reference|out|seed\nsil a sil|wavs/spk_a_04.wav|out/one.wav|1\ns e|wavs/spk_b_05.wav|out/two.wav\n").unwrap();
    ok(voxflow(&["tts", "--checkpoint", s(&t.checkpoint), "--batch", s(&batch)]));
    assert!(t.root.join("out/one.wav").exists() && t.root.join("out/two.wav").exists());

    let vc_batch = t.root.join("vc.txt");
    std::fs::write(&vc_batch, "wavs/spk_a_04.wav|wavs/spk_b_04.wav|out/vc.wav\n").unwrap();
    ok(voxflow(&["vc", "--checkpoint", s(&t.checkpoint), "--batch", s(&vc_batch)]));
    let source_frames = wav_len(&t.root.join("wavs/spk_a_04.wav")) / HOP + 1;
    assert_eq!(wav_len(&t.root.join("out/vc.wav")), source_frames * HOP);
}

#[test]
fn eval_reports_pairs_sweep_and_wer_config() {
    let t = trained();
    let out = t.root.join("eval");
    let stdout = ok(voxflow(&[
        "eval", "--checkpoint", s(&t.checkpoint), "--config", s(&t.config), "--out", s(&out), "--smcs", "--sweep",
        "--set", "sweep_lengths=1,3,5",
    ]));
    let smcs = std::fs::read_to_string(out.join("smcs.tsv")).unwrap();
    let rows: Vec<&str> = smcs.lines().collect();
    assert_eq!(rows.len(), 6, "{smcs}");
    assert!(rows[4].starts_with("mean\t"));
    for r in &rows[..4] {
        let c: f64 = r.split('\t').nth(1).unwrap().parse().unwrap();
        assert!((-1.0..=1.0).contains(&c));
    }
    let sweep = std::fs::read_to_string(out.join("sweep.tsv")).unwrap();
    assert_eq!(sweep.lines().count(), 4, "{sweep}");
    assert!(stdout.contains("smcs mean"));

    let o = voxflow(&["eval", "--checkpoint", s(&t.checkpoint), "--config", s(&t.config), "--out", s(&out), "--wer"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("asr_command"), "{}", stderr(&o));
}

#[test]
fn eval_uses_external_commands() {
    let t = trained();
    let out = t.root.join("eval_ext");
    ok(voxflow(&[
        "eval", "--checkpoint", s(&t.checkpoint), "--config", s(&t.config), "--out", s(&out), "--wer", "--plot",
        "--set", "asr_command=echo sil", "--set", "embedder_command=echo 1 2 3",
    ]));
    let wer: f64 = std::fs::read_to_string(out.join("wer.txt")).unwrap().trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&wer));
    let plot = std::fs::read_to_string(out.join("embeddings.tsv")).unwrap();
    assert!(plot.lines().filter(|l| l.contains("spk_")).count() == 4, "{plot}");
}

#[test]
fn inspect_prints_merged_config() {
    let t = trained();
    let text = ok(voxflow(&["inspect", s(&t.config), "--set", "lambda_d=2"]));
    assert!(text.lines().any(|l| l == "lambda_d = 2.0"), "{text}");
    assert!(text.lines().any(|l| l == "steps = 2000"), "{text}");
}
