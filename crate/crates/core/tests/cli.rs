use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use diffusion_tad::config::RunConfig;
use diffusion_tad::data::SyntheticSpec;
use diffusion_tad::train::Fusion;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffusion-tad")).args(args).output().expect("spawn cli")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.synth = SyntheticSpec {
        num_videos: 3,
        snippets: 20,
        feat_dim: 3,
        classes: 2,
        min_length: 3,
        max_length: 6,
        max_actions: 2,
        ..SyntheticSpec::default()
    };
    cfg.data.fusion = Fusion::Early;
    cfg.model.model_dim = 8;
    cfg.model.decoder_layers = 1;
    cfg.model.scales = 2;
    cfg.fit_model_to_data(3, 2);
    cfg.train.steps = 3;
    cfg.train.batch = 2;
    cfg.train.proposals = 6;
    cfg.sample.proposals = 6;
    cfg.sample.steps = 2;
    cfg
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().expect("tempdir"),
        };
        fs::write(ws.path("run.toml"), tiny_config().to_toml()).expect("config");
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn synth(&self) {
        let o = run(&["make-synth", "--config", &self.arg("run.toml"), "--out", &self.arg("data")]);
        assert!(o.status.success(), "{}", stderr(&o));
    }

    fn train(&self) {
        let o = run(&[
            "train",
            "--config",
            &self.arg("run.toml"),
            "--data",
            &self.arg("data"),
            "--out",
            &self.arg("model.ckpt"),
            "--log",
            &self.arg("train.jsonl"),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
}

fn assert_one_line_failure(o: &Output) {
    assert!(!o.status.success());
    let err = stderr(o);
    assert!(err.starts_with("error: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn synth_train_sample_eval_round_trip() {
    let ws = Workspace::new();
    ws.synth();
    ws.train();
    let log = fs::read_to_string(ws.path("train.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let o = run(&[
        "sample",
        "--checkpoint",
        &ws.arg("model.ckpt"),
        "--data",
        &ws.arg("data"),
        "--out",
        &ws.arg("pred.tsv"),
        "--steps",
        "3",
        "--no-sc",
        "--gamma",
        "-0.5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pred = fs::read_to_string(ws.path("pred.tsv")).unwrap();
    assert!(pred.lines().any(|l| l.starts_with("# ")));
    assert!(pred.contains("steps = 3"));
    assert!(pred.contains("gamma = -0.5"));
    assert_eq!(pred.lines().filter(|l| !l.starts_with('#')).count(), 3 * 6);

    let o = run(&[
        "eval",
        "--predictions",
        &ws.arg("pred.tsv"),
        "--data",
        &ws.arg("data"),
        "--metrics",
        &ws.arg("metrics.txt"),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("class"));
    let metrics = fs::read_to_string(ws.path("metrics.txt")).unwrap();
    let average: f64 = metrics
        .lines()
        .find_map(|l| l.strip_prefix("average_map = "))
        .expect("average line")
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&average));
}

#[test]
fn ablation_writes_a_table() {
    let ws = Workspace::new();
    ws.synth();
    ws.train();
    let o = run(&[
        "ablate",
        "nms",
        "--checkpoint",
        &ws.arg("model.ckpt"),
        "--data",
        &ws.arg("data"),
        "--out",
        &ws.arg("nms.tsv"),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(ws.path("nms.tsv")).unwrap();
    let rows: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("nms\tmap@0.3"));
}

#[test]
fn seed_flag_changes_the_synthetic_data() {
    let ws = Workspace::new();
    let feats = |out: &str, seed: &str| {
        let o = run(&["make-synth", "--config", &ws.arg("run.toml"), "--seed", seed, "--out", &ws.arg(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read_to_string(ws.path(out).join("annotations.jsonl")).unwrap()
    };
    assert_eq!(feats("a", "1"), feats("b", "1"));
    assert_ne!(feats("a", "1"), feats("c", "2"));
}

#[test]
fn missing_dataset_fails_without_outputs() {
    let ws = Workspace::new();
    let o = run(&[
        "train",
        "--config",
        &ws.arg("run.toml"),
        "--data",
        &ws.arg("nowhere"),
        "--out",
        &ws.arg("model.ckpt"),
        "--log",
        &ws.arg("train.jsonl"),
    ]);
    assert_one_line_failure(&o);
    assert!(!ws.path("model.ckpt").exists());
    assert!(!ws.path("train.jsonl").exists());
}

#[test]
fn bad_config_is_rejected() {
    let ws = Workspace::new();
    fs::write(ws.path("bad.toml"), "[train]\nstepz = 3\n").unwrap();
    let o = run(&["make-synth", "--config", &ws.arg("bad.toml"), "--out", &ws.arg("data")]);
    assert_one_line_failure(&o);
    assert!(stderr(&o).contains("stepz"));
    assert!(!ws.path("data").join("config.toml").exists());
}

#[test]
fn corrupt_checkpoint_fails_without_predictions() {
    let ws = Workspace::new();
    ws.synth();
    ws.train();
    let bytes = fs::read(ws.path("model.ckpt")).unwrap();
    fs::write(ws.path("cut.ckpt"), &bytes[..bytes.len() / 2]).unwrap();
    let o = run(&[
        "sample",
        "--checkpoint",
        &ws.arg("cut.ckpt"),
        "--data",
        &ws.arg("data"),
        "--out",
        &ws.arg("pred.tsv"),
    ]);
    assert_one_line_failure(&o);
    assert!(!ws.path("pred.tsv").exists());
}

#[test]
fn out_of_range_gamma_fails() {
    let ws = Workspace::new();
    ws.synth();
    ws.train();
    let o = run(&[
        "sample",
        "--checkpoint",
        &ws.arg("model.ckpt"),
        "--data",
        &ws.arg("data"),
        "--out",
        &ws.arg("pred.tsv"),
        "--gamma",
        "1.5",
    ]);
    assert_one_line_failure(&o);
    assert!(!ws.path("pred.tsv").exists());
}

#[test]
fn eval_of_unknown_video_leaves_no_report() {
    let ws = Workspace::new();
    ws.synth();
    let pred = ws.path("pred.tsv");
    fs::write(&pred, "no_such_video\t0.0\t1.0\t0\t0.5\n").unwrap();
    let o = run(&[
        "eval",
        "--predictions",
        &ws.arg("pred.tsv"),
        "--data",
        &ws.arg("data"),
        "--out",
        &ws.arg("report.txt"),
        "--metrics",
        &ws.arg("metrics.txt"),
    ]);
    assert_one_line_failure(&o);
    assert!(!Path::new(&ws.path("report.txt")).exists());
    assert!(!ws.path("metrics.txt").exists());
}
