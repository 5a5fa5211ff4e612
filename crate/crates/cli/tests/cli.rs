use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = "\
[src]
d = 2
blocks = 1
heads = 2
mlp_ratio = 2
epochs = 1
batch_size = 16
warmup_epochs = 0
cosine_start_epoch = 0

[flow]
blocks = 2
deep_layers = 1
width = 8
heads = 2
mlp_ratio = 2
epochs = 1
batch_size = 16
warmup_epochs = 0
cosine_start_epoch = 0

[train]
seed = 3
";

fn srcflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srcflow")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = srcflow(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_owned()
}

fn write_small_config(dir: &TempDir) -> String {
    let path = p(dir, "small.cfg");
    fs::write(&path, SMALL).unwrap();
    path
}

#[test]
fn pca_reports_rank_of_noise_free_data() {
    let dir = TempDir::new().unwrap();
    let data = p(&dir, "rank3.sftk");
    ok(&[
        "gen-data",
        "--out",
        &data,
        "--examples",
        "128",
        "--tokens",
        "4",
        "--channels",
        "12",
        "--rank",
        "3",
        "--noise-std",
        "0",
    ]);
    let stdout = ok(&["pca", "--data", &data, "--out", &p(&dir, "spectrum.csv")]);
    assert!(stdout.contains("intrinsic_dim 3"), "{stdout}");
    let csv = fs::read_to_string(dir.path().join("spectrum.csv")).unwrap();
    assert!(csv.lines().count() > 3);
}

#[test]
fn full_pipeline_runs_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = write_small_config(&dir);
    let data = p(&dir, "data.sftk");
    ok(&["gen-data", "--out", &data, "--examples", "64", "--tokens", "4", "--channels", "8", "--rank", "2"]);
    ok(&["stats", "--data", &data, "--out", &p(&dir, "data.stats")]);

    let src = p(&dir, "src.ckpt");
    ok(&["train-src", "--config", &cfg, "--data", &data, "--out", &src]);
    assert!(Path::new(&format!("{src}.metrics.csv")).exists());

    let flow = p(&dir, "flow.ckpt");
    let metrics = p(&dir, "flow.csv");
    ok(&["train-flow", "--config", &cfg, "--data", &data, "--ckpt", &src, "--out", &flow, "--metrics", &metrics]);
    let header = fs::read_to_string(&metrics).unwrap();
    assert!(header.starts_with("step,lr,loss,logdet_mean,grad_norm"));

    let flow_again = p(&dir, "flow2.ckpt");
    ok(&["train-flow", "--config", &cfg, "--data", &data, "--ckpt", &src, "--out", &flow_again]);
    assert_eq!(fs::read(&flow).unwrap(), fs::read(&flow_again).unwrap());

    let (a, b) = (p(&dir, "a.sftk"), p(&dir, "b.sftk"));
    ok(&["sample", "--ckpt", &flow, "--out", &a, "--count", "5", "--cfg", "0", "--seed", "11"]);
    ok(&["sample", "--ckpt", &flow, "--out", &b, "--count", "5", "--cfg", "0", "--seed", "11"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read(format!("{a}.decoded.sftk")).unwrap(), fs::read(format!("{b}.decoded.sftk")).unwrap());

    let stdout = ok(&["nll", "--ckpt", &flow, "--data", &data, "--out", &p(&dir, "nll.csv")]);
    let mean: f64 = stdout.trim().strip_prefix("mean_nll_per_dim ").unwrap().parse().unwrap();
    assert!(mean.is_finite());
}

#[test]
fn conditional_guided_sampling() {
    let dir = TempDir::new().unwrap();
    let cfg = write_small_config(&dir);
    let data = p(&dir, "mix.sftk");
    ok(&["gen-data", "--kind", "mixture", "--out", &data, "--examples", "64", "--classes", "3"]);
    let flow = p(&dir, "flow.ckpt");
    ok(&["train-flow", "--config", &cfg, "--data", &data, "--out", &flow]);
    ok(&["sample", "--ckpt", &flow, "--out", &p(&dir, "s.sftk"), "--label", "2", "--cfg", "1.5", "--count", "4"]);
    let bad = srcflow(&["sample", "--ckpt", &flow, "--out", &p(&dir, "t.sftk"), "--label", "9"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn verify_fresh_model_passes() {
    let dir = TempDir::new().unwrap();
    let cfg = write_small_config(&dir);
    let csv = p(&dir, "verify.csv");
    ok(&["verify", "--config", &cfg, "--out", &csv, "--precision", "64"]);
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert!(rows.iter().any(|r| r.starts_with("invertibility_64bit")), "{text}");
    assert!(rows.iter().all(|r| r.contains(",true,")), "{text}");
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    assert_eq!(srcflow(&["stats", "--data", &p(&dir, "missing.sftk"), "--out", &p(&dir, "x")]).status.code(), Some(3));
    assert_eq!(srcflow(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(srcflow(&["--help"]).status.code(), Some(0));

    let bad_cfg = p(&dir, "bad.cfg");
    fs::write(&bad_cfg, "[flow]\nwidht = 8\n").unwrap();
    assert_eq!(srcflow(&["verify", "--config", &bad_cfg]).status.code(), Some(2));

    let garbage = p(&dir, "garbage.sftk");
    fs::write(&garbage, b"not a dataset").unwrap();
    let out = srcflow(&["stats", "--data", &garbage, "--out", &p(&dir, "y")]);
    assert_ne!(out.status.code(), Some(0));
}
