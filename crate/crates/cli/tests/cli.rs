use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use simref_cli::{run_cli, EXIT_INVALID, EXIT_NUMERICAL, EXIT_OK, FAILED_SENTINEL};
use simref_core::tensor::Tensor;
use tempfile::TempDir;

const TINY: &str = r#"{
  "train": {
    "steps": 3, "batch": 4, "buffer_capacity": 8,
    "pretrain_r_steps": 2, "pretrain_d_steps": 2,
    "refiner": {"input_channels": 1, "filters": 4, "blocks": 1, "kernel": 3}
  },
  "world": {"height": 16, "width": 16},
  "n_synthetic": 24, "n_real": 24, "n_test": 12, "n_drift": 100,
  "predictor": {"epochs": 1, "arch": {"height": 16, "width": 16, "filters": [4, 4, 4], "hidden": 8}},
  "probe": {"steps": 2, "batch": 4}
}"#;

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.json"), TINY).unwrap();
        Self { dir }
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.p(rel).to_string_lossy().into_owned()
    }

    fn run(&self, args: &[&str]) -> i32 {
        let mut argv = vec!["simref".to_string()];
        argv.extend(args.iter().map(|a| a.to_string()));
        run_cli(argv)
    }

    /// `train`/`pretrain` against the tiny config under `runs/`.
    fn train(&self, cmd: &str, name: &str, extra: &[&str]) -> i32 {
        let (cfg, runs) = (self.s("tiny.json"), self.s("runs"));
        let mut args = vec![cmd, "--config", &cfg, "--runs-dir", &runs, "--name", name];
        args.extend_from_slice(extra);
        self.run(&args)
    }

    fn gen(&self, out: &str, role: &str, n: usize, seed: u64) -> i32 {
        let (o, c) = (self.s(out), self.s("tiny.json"));
        let (n, seed) = (n.to_string(), seed.to_string());
        self.run(&["gen-data", "--out", &o, "--role", role, "--n", &n, "--seed", &seed, "--config", &c])
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn help_and_bad_arguments() {
    let sb = Sandbox::new();
    assert_eq!(sb.run(&["--help"]), EXIT_OK);
    assert_eq!(sb.run(&["train", "--help"]), EXIT_OK);
    assert_eq!(sb.run(&["train", "--bogus-flag"]), EXIT_INVALID);
    assert_eq!(sb.run(&["frobnicate"]), EXIT_INVALID);
    assert_eq!(sb.run(&[]), EXIT_INVALID);
    assert_eq!(sb.run(&["train", "--psi", "sideways"]), EXIT_INVALID);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_simref");
    let out = Command::new(bin).arg("--version").output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_OK));
    let out = Command::new(bin).args(["drift", "--nope"]).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_INVALID));
    let sb = Sandbox::new();
    let out = Command::new(bin)
        .args(["grad-check", "--seeds", "1", "--first-seed", "5"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_OK));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("conv2d") && text.contains("loss_refiner"), "{text}");
    drop(sb);
}

#[test]
fn unknown_config_fields_rejected() {
    let sb = Sandbox::new();
    fs::write(sb.p("bad.json"), r#"{"train": {"lamda": 0.3}}"#).unwrap();
    let (cfg, runs) = (sb.s("bad.json"), sb.s("runs"));
    assert_eq!(sb.run(&["train", "--config", &cfg, "--runs-dir", &runs]), EXIT_INVALID);
    fs::write(sb.p("bad.json"), r#"{"world": {"hieght": 16}}"#).unwrap();
    assert_eq!(sb.run(&["train", "--config", &cfg, "--runs-dir", &runs]), EXIT_INVALID);
}

#[test]
fn invalid_flag_values_rejected() {
    let sb = Sandbox::new();
    assert_eq!(sb.train("train", "odd", &["--batch", "5"]), EXIT_INVALID);
    assert_eq!(sb.train("train", "neg", &["--lambda", "-1"]), EXIT_INVALID);
    assert!(!sb.p("runs/odd").exists());
}

#[test]
fn gen_data_writes_datasets() {
    let sb = Sandbox::new();
    assert_eq!(sb.gen("syn", "synthetic", 8, 1), EXIT_OK);
    assert_eq!(sb.gen("real", "real", 8, 2), EXIT_OK);
    for f in ["manifest.json", "images.tns", "annotations.csv"] {
        assert!(sb.p("syn").join(f).exists(), "{f}");
    }
    assert!(!sb.p("real/annotations.csv").exists());
    let stack = Tensor::read_tns1(sb.p("syn/images.tns")).unwrap();
    assert_eq!(stack.shape(), &[8, 1, 16, 16]);
}

#[test]
fn train_twice_gives_identical_logs() {
    let sb = Sandbox::new();
    assert_eq!(sb.train("train", "a", &["--seed", "7"]), EXIT_OK);
    assert_eq!(sb.train("train", "b", &["--seed", "7"]), EXIT_OK);
    let (a, b) = (read(&sb.p("runs/a/log.csv")), read(&sb.p("runs/b/log.csv")));
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 4);
    for f in ["config.json", "ckpt/state.json", "ckpt/refiner/manifest.json"] {
        assert!(sb.p("runs/a").join(f).exists(), "{f}");
    }
    assert_eq!(sb.train("train", "c", &["--seed", "8"]), EXIT_OK);
    assert_ne!(read(&sb.p("runs/a/log.csv")), read(&sb.p("runs/c/log.csv")));
}

#[test]
fn flags_override_config_file() {
    let sb = Sandbox::new();
    assert_eq!(sb.train("pretrain", "o", &["--lambda", "0.9", "--steps", "5"]), EXIT_OK);
    let echoed: serde_json::Value = serde_json::from_slice(&read(&sb.p("runs/o/config.json"))).unwrap();
    assert_eq!(echoed["train"]["lambda"], 0.9);
    assert_eq!(echoed["train"]["steps"], 5);
    assert_eq!(echoed["train"]["batch"], 4);
}

#[test]
fn pretrain_then_resume_matches_straight_run() {
    let sb = Sandbox::new();
    assert_eq!(sb.train("train", "straight", &[]), EXIT_OK);
    assert_eq!(sb.train("pretrain", "split", &[]), EXIT_OK);
    assert!(!sb.p("runs/split/log.csv").exists());
    assert_eq!(sb.train("train", "split", &["--resume", "--steps", "2"]), EXIT_OK);
    assert_eq!(sb.train("train", "split", &["--resume"]), EXIT_OK);
    assert_eq!(read(&sb.p("runs/straight/log.csv")), read(&sb.p("runs/split/log.csv")));

    assert_eq!(sb.train("train", "split", &["--resume", "--lambda", "0.7"]), EXIT_INVALID);
    assert!(sb.p("runs/split").join(FAILED_SENTINEL).exists());
    assert_eq!(
        sb.train("train", "split", &["--resume", "--lambda", "0.7", "--allow-config-change", "--steps", "4"]),
        EXIT_OK
    );
    assert!(!sb.p("runs/split").join(FAILED_SENTINEL).exists());
}

#[test]
fn resume_without_checkpoint_fails() {
    let sb = Sandbox::new();
    assert_eq!(sb.train("train", "none", &["--resume"]), EXIT_INVALID);
}

#[test]
fn numerical_abort_exits_2_and_marks_run() {
    let sb = Sandbox::new();
    let code = sb.train("train", "nan", &["--lr-d", "1e38", "--lr-r", "1e38", "--steps", "50"]);
    assert_eq!(code, EXIT_NUMERICAL);
    let sentinel = fs::read_to_string(sb.p("runs/nan").join(FAILED_SENTINEL)).unwrap();
    assert!(!sentinel.is_empty());
}

#[test]
fn refine_stack_and_dataset() {
    let sb = Sandbox::new();
    assert_eq!(sb.train("train", "r", &[]), EXIT_OK);
    assert_eq!(sb.gen("syn", "synthetic", 5, 3), EXIT_OK);
    let (ckpt, input, out) = (sb.s("runs/r/ckpt"), sb.s("syn/images.tns"), sb.s("refined.tns"));
    assert_eq!(sb.run(&["refine", "--ckpt", &ckpt, "--in", &input, "--out", &out]), EXIT_OK);
    let a = Tensor::read_tns1(sb.p("syn/images.tns")).unwrap();
    let b = Tensor::read_tns1(sb.p("refined.tns")).unwrap();
    assert_eq!(a.shape(), b.shape());

    let data = sb.s("syn");
    assert_eq!(sb.run(&["refine", "--ckpt", &ckpt, "--in", &data]), EXIT_OK);
    assert!(sb.p("runs/r/refined/annotations.csv").exists());
    assert_eq!(read(&sb.p("runs/r/refined/annotations.csv")), read(&sb.p("syn/annotations.csv")));

    let missing = sb.s("nope");
    assert_eq!(sb.run(&["refine", "--ckpt", &missing, "--in", &input]), EXIT_INVALID);
}

#[test]
fn eval_writes_curves() {
    let sb = Sandbox::new();
    assert_eq!(sb.gen("syn", "synthetic", 16, 1), EXIT_OK);
    assert_eq!(sb.gen("real", "real", 10, 2), EXIT_OK);
    let (tr, te, cfg, runs) = (sb.s("syn"), sb.s("real"), sb.s("tiny.json"), sb.s("runs"));
    let args = ["eval", "--train", &tr, "--test", &te, "--config", &cfg, "--name", "e", "--runs-dir", &runs];
    assert_eq!(sb.run(&args), EXIT_OK);
    let curves = fs::read_to_string(sb.p("runs/e/curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 8);

    assert_eq!(
        sb.run(&["eval", "--train", &te, "--test", &te, "--config", &cfg]),
        EXIT_INVALID,
        "real images have no labels"
    );
    assert_eq!(sb.run(&["eval", "--train", &tr, "--test", &tr, "--config", &cfg]), EXIT_INVALID);
}

#[test]
fn drift_needs_a_hundred_images() {
    let sb = Sandbox::new();
    assert_eq!(sb.train("pretrain", "d", &[]), EXIT_OK);
    assert_eq!(sb.gen("big", "synthetic", 100, 4), EXIT_OK);
    assert_eq!(sb.gen("small", "synthetic", 20, 4), EXIT_OK);
    let ckpt = sb.s("runs/d/ckpt");
    assert_eq!(sb.run(&["drift", "--ckpt", &ckpt, "--data", &sb.s("big")]), EXIT_OK);
    assert_eq!(sb.run(&["drift", "--ckpt", &ckpt, "--data", &sb.s("small")]), EXIT_INVALID);
}

#[test]
fn export_study_outputs() {
    let sb = Sandbox::new();
    let out = sb.s("study");
    assert_eq!(sb.run(&["export-study", "--matrix", "224,276,207,293", "--out", &out]), EXIT_OK);
    let csv = fs::read_to_string(sb.p("study/confusion.csv")).unwrap();
    assert!(csv.contains("real,224,276"));

    assert_eq!(sb.train("pretrain", "s", &[]), EXIT_OK);
    assert_eq!(sb.gen("syn", "synthetic", 6, 1), EXIT_OK);
    assert_eq!(sb.gen("real", "real", 6, 2), EXIT_OK);
    let (ckpt, real, syn) = (sb.s("runs/s/ckpt"), sb.s("real"), sb.s("syn"));
    let args = [
        "export-study", "--matrix", "1,0,0,1", "--out", &out, "--ckpt", &ckpt, "--real", &real, "--synthetic", &syn,
        "--count", "4", "--cols", "2",
    ];
    assert_eq!(sb.run(&args), EXIT_OK);
    assert!(sb.p("study/real.pgm").exists() && sb.p("study/refined.pgm").exists());

    let zero = sb.s("zero");
    assert_eq!(sb.run(&["export-study", "--matrix", "0,0,0,0", "--out", &zero]), EXIT_INVALID);
    assert!(sb.p("zero").join(FAILED_SENTINEL).exists());
    assert_eq!(sb.run(&["export-study", "--matrix", "1,2,3", "--out", &zero]), EXIT_INVALID);
}

#[test]
fn sweep_lambda_writes_rows() {
    let sb = Sandbox::new();
    let (cfg, runs) = (sb.s("tiny.json"), sb.s("runs"));
    let args = ["sweep-lambda", "--values", "0.1,2.0", "--config", &cfg, "--runs-dir", &runs];
    assert_eq!(sb.run(&args), EXIT_OK);
    let csv = fs::read_to_string(sb.p("runs/sweep/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "lambda,drift_mean_px,drift_std_px,baseline_px,refined_px,downstream_gain_px");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0.1,") && lines[2].starts_with("2,"));
    assert_eq!(sb.run(&["sweep-lambda", "--values", "-1", "--config", &cfg, "--runs-dir", &runs]), EXIT_INVALID);
}

#[test]
fn train_from_dataset_directories() {
    let sb = Sandbox::new();
    assert_eq!(sb.gen("syn", "synthetic", 12, 1), EXIT_OK);
    assert_eq!(sb.gen("real", "real", 12, 2), EXIT_OK);
    let (syn, real) = (sb.s("syn"), sb.s("real"));
    assert_eq!(sb.train("train", "dirs", &["--synthetic", &syn, "--real", &real]), EXIT_OK);
    assert_eq!(sb.train("train", "swapped", &["--synthetic", &real, "--real", &syn]), EXIT_INVALID);
    assert_eq!(sb.train("train", "half", &["--synthetic", &syn]), EXIT_INVALID);
}
