use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mast::checkpoint::Checkpoint;

fn mast(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mast"))
        .args(args)
        .current_dir(cwd)
        .env("MAST_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

/// A tiny dataset, config and trained checkpoint shared by the tests below.
struct Fixture {
    dir: tempfile::TempDir,
    ckpt: PathBuf,
}

impl Fixture {
    fn path(&self) -> &Path {
        self.dir.path()
    }
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(&mast(&["gen-data", "--out", "data", "--n", "40", "--side", "16", "--seed", "2"], root));
    let config = serde_json::json!({
        "dataset": "data",
        "output_dir": "run",
        "seed": 4,
        "augmentations": "color_jitter,translate_x",
        "model": {"embed_dim": 8, "hidden": 8, "channels": [4, 4, 8]},
        "schedule": {"epochs": 2, "batch_size": 8},
        "probe": {"epochs": 5}
    });
    fs::write(root.join("config.json"), config.to_string()).unwrap();
    let printed = ok(&mast(&["pretrain", "--config", "config.json"], root));
    let ckpt = root.join(printed.trim());
    assert!(ckpt.exists(), "{}", ckpt.display());
    Fixture { dir, ckpt }
}

#[test]
fn pretrain_writes_a_metrics_log_and_is_repeatable() {
    let f = fixture();
    let log = f.path().join("run/metrics.ndjson");
    let first = fs::read(&log).unwrap();
    let lines: Vec<serde_json::Value> = String::from_utf8(first.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2 * 40usize.div_ceil(8));
    assert!(lines.iter().all(|l| l["total"].as_f64().unwrap().is_finite()));

    ok(&mast(&["pretrain", "--config", "config.json", "--set", "output_dir=\"again\""], f.path()));
    assert_eq!(fs::read(f.path().join("again/metrics.ndjson")).unwrap(), first);
    let a = Checkpoint::load(&f.path().join("again/final.ckpt")).unwrap();
    let b = Checkpoint::load(&f.ckpt).unwrap();
    assert_eq!(a.arrays, b.arrays);
    assert_eq!((a.meta.step, a.meta.config_hash == b.meta.config_hash), (b.meta.step, false));
}

#[test]
fn probe_reports_json() {
    let f = fixture();
    let ck = f.ckpt.to_str().unwrap();
    ok(&mast(&["probe", "--ckpt", ck, "--data", "data", "--out", "probe.json"], f.path()));
    let r: serde_json::Value = serde_json::from_slice(&fs::read(f.path().join("probe.json")).unwrap()).unwrap();
    let top1 = r["top1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&top1));
    assert_eq!(r["confusion"].as_array().unwrap().len(), r["per_class"].as_array().unwrap().len());

    let stdout = ok(&mast(&["probe", "--ckpt", ck, "--data", "data", "--rotation", "--epochs", "2"], f.path()));
    let r: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(r["per_class"].as_array().unwrap().len(), 4);
}

#[test]
fn analyses_write_csv_tables() {
    let f = fixture();
    let ck = f.ckpt.to_str().unwrap();
    ok(&mast(&["analyze", "masks", "--ckpt", ck, "--out", "an"], f.path()));
    let (header, rows) = read_csv(&f.path().join("an/mask_correlation.csv"));
    assert_eq!(header, ["op", "color_jitter", "translate_x"]);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][2], rows[1][1]);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[i + 1], "1.000000");
    }
    assert!(f.path().join("an/mask_correlation.ppm").exists());

    let inv = ["analyze", "invariance", "--ckpt", ck, "--out", "an", "--data", "data", "--op", "translate_x"];
    ok(&mast(&[&inv[..], &["--points", "4", "--samples", "10"]].concat(), f.path()));
    let (header, rows) = read_csv(&f.path().join("an/invariance_translate_x.csv"));
    assert_eq!(header, ["strength", "magnitude", "unmasked", "color_jitter", "translate_x"]);
    assert_eq!(rows.len(), 4);
    assert!(rows[0][2..].iter().all(|v| (v.parse::<f64>().unwrap() - 1.0).abs() < 1e-5), "{rows:?}");
    for r in &rows {
        assert!(r.iter().all(|v| v.parse::<f64>().unwrap().abs() <= 1.0 + 1e-9));
    }
    assert!(f.path().join("an/invariance_translate_x.svg").exists());

    let unc = ["analyze", "uncertainty", "--ckpt", ck, "--out", "an", "--data", "data", "--samples", "12"];
    ok(&mast(&unc, f.path()));
    let (_, rows) = read_csv(&f.path().join("an/uncertainty_scores.csv"));
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r[1].parse::<f64>().unwrap())));
    let (header, rows) = read_csv(&f.path().join("an/uncertainty_strength.csv"));
    assert_eq!(header[0], "samples");
    assert_eq!(rows[0][0], "12");

    ok(&mast(&["analyze", "subspace-class", "--ckpt", ck, "--out", "an", "--data", "data"], f.path()));
    let (header, rows) = read_csv(&f.path().join("an/subspace_class.csv"));
    assert_eq!(header[0], "subspace");
    assert!(rows.is_empty() || rows.len() == 2);
}

#[test]
fn analyses_are_byte_identical_on_rerun() {
    let f = fixture();
    let ck = f.ckpt.to_str().unwrap();
    let read = |out: &str| {
        ok(&mast(&["analyze", "invariance", "--ckpt", ck, "--out", out, "--data", "data", "--op", "color_jitter", "--samples", "8"], f.path()));
        fs::read(f.path().join(out).join("invariance_color_jitter.csv")).unwrap()
    };
    assert_eq!(read("a"), read("b"));
}

#[test]
fn coefficient_sweep_table() {
    let f = fixture();
    ok(&mast(&["ablate", "coeff-sweep", "--config", "config.json", "--scale", "0.5", "--scale", "2"], f.path()));
    let (header, rows) = read_csv(&f.path().join("run/ablation.csv"));
    assert_eq!(header, ["run", "top1_percent", "checkpoint"]);
    let runs: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(runs, ["scale_0.5", "scale_2"]);
    let meta = fs::read(f.path().join("run/scale_2/final.ckpt")).unwrap();
    assert!(meta.starts_with(b"MASTCKPT"));
}

#[test]
fn leave_one_out_table() {
    let f = fixture();
    ok(&mast(&["ablate", "leave-one-out", "--config", "config.json", "--op", "translate_x"], f.path()));
    let (_, rows) = read_csv(&f.path().join("run/ablation.csv"));
    let runs: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(runs, ["full", "without_translate_x"]);
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let f = fixture();
    let out = mast(&["pretrain", "--config", "config.json", "--set", "schedule.epochs=0"], f.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schedule.epochs"));

    let out = mast(&["pretrain", "--config", "config.json", "--set", "model.nope=1"], f.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.nope"));

    let out = mast(&["pretrain", "--config", "config.json", "--bogus"], f.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = mast(&["probe", "--ckpt", "absent.ckpt", "--data", "absent"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.ckpt"));
    let out = mast(&["gen-data", "--out", "d", "--label-factor", "texture"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}
