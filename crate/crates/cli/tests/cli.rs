use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn tsvit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsvit")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = tsvit(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn stderr_of(args: &[&str]) -> String {
    let out = tsvit(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_MODEL: &str = "signal_len = 128\npatch_len = 16\nembed_dim = 8\nheads = 2\nblocks = 1\nmlp_dim = 16\nnum_classes = 4\n";

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn synth(&self, name: &str, per_class: usize, length: usize, seed: u64) -> PathBuf {
        let p = self.path(name);
        ok(&["gen-synth", "--out", s(&p), "--per-class", &per_class.to_string(), "--length", &length.to_string(), "--seed", &seed.to_string()]);
        p
    }

    fn config(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, text).unwrap();
        p
    }
}

#[test]
fn gen_synth_is_seeded() {
    let f = Fixture::new();
    let a = f.synth("a.tsvd", 500, 64, 42);
    let b = f.synth("b.tsvd", 500, 64, 42);
    let c = f.synth("c.tsvd", 500, 64, 43);
    let bytes = fs::read(&a).unwrap();
    assert_eq!(&bytes[..4], b"TSVD");
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    assert_eq!(count, 2000);
    assert_eq!(bytes, fs::read(&b).unwrap());
    assert_ne!(bytes, fs::read(&c).unwrap());
}

#[test]
fn train_smoke_and_eval() {
    let f = Fixture::new();
    let data = f.synth("d.tsvd", 2, 128, 1);
    let cfg = f.config("c.cfg", &format!("{SMALL_MODEL}epochs = 1\ntrials = 1\nbatch_size = 4\n"));
    let out = f.path("run");
    let stdout = ok(&["train", "--quiet", "--data", s(&data), "--test", s(&data), "--config", s(&cfg), "--out-dir", s(&out)]);
    assert!(stdout.contains("MaxAcc MinAcc AvgAcc"));

    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2, "{metrics}");
    assert!(out.join("trial_0.tsvm").exists());
    assert!(!out.join("trial_1.tsvm").exists());
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    let v: Vec<f64> = summary.lines().nth(1).unwrap().split_whitespace().map(|x| x.parse().unwrap()).collect();
    assert!(v[1] <= v[2] && v[2] <= v[0], "{summary}");

    let eval_dir = f.path("eval");
    let stdout = ok(&["eval", "--data", s(&data), "--checkpoint", s(&out.join("trial_0.tsvm")), "--out-dir", s(&eval_dir)]);
    assert!(stdout.starts_with("accuracy "));
    let confusion = fs::read_to_string(eval_dir.join("confusion.csv")).unwrap();
    let total: u64 = confusion
        .lines()
        .skip(1)
        .flat_map(|l| l.split(',').filter_map(|x| x.parse::<u64>().ok()))
        .sum();
    assert_eq!(total, 8);
}

#[test]
fn summary_orders_trials() {
    let f = Fixture::new();
    let data = f.synth("d.tsvd", 5, 128, 2);
    let cfg = f.config("c.cfg", &format!("{SMALL_MODEL}epochs = 2\ntrials = 3\nlearning_rate = 1e-3\n"));
    let out = f.path("run");
    ok(&["train", "--quiet", "--data", s(&data), "--config", s(&cfg), "--out-dir", s(&out)]);
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    let v: Vec<f64> = summary.lines().nth(1).unwrap().split_whitespace().map(|x| x.parse().unwrap()).collect();
    assert!(v[1] <= v[2] && v[2] <= v[0], "{summary}");
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count(), 1 + 3 * 2);
    for t in 0..3 {
        assert!(out.join(format!("confusion_trial_{t}.csv")).exists());
    }
}

#[test]
fn eval_after_memorization_is_perfect() {
    let f = Fixture::new();
    let data = f.synth("d.tsvd", 1, 128, 3);
    let cfg = f.config(
        "c.cfg",
        &format!("{SMALL_MODEL}epochs = 150\ntrials = 1\nlearning_rate = 3e-3\nencoder_dropout = 0\nembed_dropout = 0\n"),
    );
    let out = f.path("run");
    ok(&["train", "--quiet", "--data", s(&data), "--test", s(&data), "--config", s(&cfg), "--out-dir", s(&out)]);
    let stdout = ok(&["eval", "--data", s(&data), "--checkpoint", s(&out.join("trial_0.tsvm")), "--out-dir", s(&f.path("e"))]);
    assert!(stdout.starts_with("accuracy 1.0000"), "{stdout}");
}

#[test]
fn missing_dataset_fails_before_writing() {
    let f = Fixture::new();
    let cfg = f.config("c.cfg", SMALL_MODEL);
    let out = f.path("run");
    let err = stderr_of(&["train", "--data", s(&f.path("nope.tsvd")), "--config", s(&cfg), "--out-dir", s(&out)]);
    assert!(err.contains("nope.tsvd"), "{err}");
    assert!(!out.exists());
}

#[test]
fn mismatched_signal_length_is_rejected() {
    let f = Fixture::new();
    let data = f.synth("d.tsvd", 2, 64, 1);
    let cfg = f.config("c.cfg", SMALL_MODEL);
    let out = f.path("run");
    let err = stderr_of(&["train", "--data", s(&data), "--config", s(&cfg), "--out-dir", s(&out)]);
    assert!(err.contains("64"), "{err}");
    assert!(!out.exists());
}

#[test]
fn config_errors_report_lines() {
    let f = Fixture::new();
    let data = f.synth("d.tsvd", 2, 128, 1);
    let cfg = f.config("c.cfg", "# model\nheads = 2\nembed_dims = 8\n");
    let err = stderr_of(&["train", "--data", s(&data), "--config", s(&cfg), "--out-dir", s(&f.path("run"))]);
    assert!(err.contains("line 3") && err.contains("embed_dims"), "{err}");

    let cfg = f.config("bad.cfg", "heads = 5\n");
    let err = stderr_of(&["count", "--config", s(&cfg)]);
    assert!(err.contains("divisible"), "{err}");
}

#[test]
fn export_features_counts_records() {
    let f = Fixture::new();
    let data = f.synth("d.tsvd", 2, 128, 4);
    let cfg = f.config("c.cfg", &format!("{}epochs = 1\ntrials = 1\n", SMALL_MODEL.replace("blocks = 1", "blocks = 2")));
    let out = f.path("run");
    ok(&["train", "--quiet", "--data", s(&data), "--test", s(&data), "--config", s(&cfg), "--out-dir", s(&out)]);
    let ckpt = out.join("trial_0.tsvm");
    let a = f.path("a.tsvf");
    let b = f.path("b.tsvf");
    ok(&["export-features", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&a)]);
    ok(&["export-features", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&b)]);
    let bytes = fs::read(&a).unwrap();
    assert_eq!(&bytes[..4], b"TSVF");
    let records = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    assert_eq!(records, 8 * 3);
    assert_eq!(bytes, fs::read(&b).unwrap());

    let other = f.synth("o.tsvd", 2, 64, 4);
    stderr_of(&["export-features", "--data", s(&other), "--checkpoint", s(&ckpt), "--out", s(&f.path("c.tsvf"))]);
    assert!(!f.path("c.tsvf").exists());
}

#[test]
fn count_reports_reference_figures() {
    let out = ok(&["count"]);
    assert!(out.contains("params 3580234 (3.58M)"), "{out}");
    assert!(out.contains("flops.matmul 486811392"), "{out}");
    let compat = ok(&["count", "--paper-compatible"]);
    assert!(compat.contains("flops 307494912"), "{compat}");

    let f = Fixture::new();
    for h in [4, 6, 12] {
        let cfg = f.config(&format!("h{h}.cfg"), &format!("heads = {h}\n"));
        let c = ok(&["count", "--config", s(&cfg)]);
        let matmul = |text: &str| text.lines().find(|l| l.starts_with("flops.matmul")).unwrap().to_string();
        assert_eq!(matmul(&c), matmul(&out));
        assert_eq!(c.lines().next(), out.lines().next());
        assert_eq!(ok(&["count", "--paper-compatible", "--config", s(&cfg)]), compat);
    }
}
