use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use factsurv_cli::manifest::RunManifest;
use factsurv_core::data::window::{load_cache, save_cache};
use factsurv_core::metrics::EvalReport;

fn factsurv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_factsurv"))
        .args(args)
        .env_remove("FACT_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = factsurv(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_SYNTH: &str = "n_drivers = 30\nhorizon_days = 14\nseed = 4\n";

const FAST_TRAIN: &str = r#"
[model]
lookback = 4
hidden_dim = 8
n_layers = 1
frailty_dim = 2

[training]
max_epochs = 2
seeds = [1]
"#;

/// Small synthetic data prepared with lookback 4 under `dir`.
fn prepared(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let synth_cfg = dir.join("synth.toml");
    std::fs::write(&synth_cfg, SMALL_SYNTH).unwrap();
    let train_cfg = dir.join("train.toml");
    std::fs::write(&train_cfg, FAST_TRAIN).unwrap();
    let csv = dir.join("data.csv");
    ok(&["synth", "--config", s(&synth_cfg), "--out", s(&csv)]);
    let data = dir.join("prep");
    ok(&["prep", "--in", s(&csv), "--lookback", "4", "--out", s(&data)]);
    (csv, data, train_cfg)
}

#[test]
fn pipeline_with_coxph_writes_a_valid_report() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, data, cfg) = prepared(dir.path());
    assert!(dir.path().join("data.truth.json").is_file());
    assert!(dir.path().join("data.manifest.json").is_file());
    for f in ["scaler.json", "train.cache", "val.cache", "test.cache", "prep.json", "manifest.json"] {
        assert!(data.join(f).is_file(), "{f}");
    }
    let run = dir.path().join("fit");
    ok(&["fit", "--model", "coxph", "--data", s(&data), "--config", s(&cfg), "--out", s(&run)]);
    let ev = dir.path().join("eval");
    ok(&["eval", "--model", s(&run.join("model.ckpt")), "--data", s(&data), "--out", s(&ev)]);
    let report = EvalReport::from_text(&std::fs::read_to_string(ev.join("report.txt")).unwrap()).unwrap();
    report.validate().unwrap();
    assert_eq!(report.quantiles, vec![0.25, 0.5, 0.75]);
    assert_eq!(report.model, "linear");
    // Evaluating the stored baseline reproduces the fit's own report.
    let fit_report = std::fs::read_to_string(run.join("report.txt")).unwrap();
    assert_eq!(fit_report, std::fs::read_to_string(ev.join("report.txt")).unwrap());

    let manifest = RunManifest::read(&run.join("manifest.json")).unwrap();
    assert_eq!(manifest.status, "ok");
    assert_eq!(manifest.command, "fit");
    assert!(manifest.inputs.keys().any(|k| k.ends_with("train.cache")));
    assert_eq!(manifest.resolved_config["training"]["solver"], "newton");
    assert_eq!(manifest.resolved_config["training"]["batch_size"], 256);
    let _ = csv;
}

#[test]
fn km_time_of_day_has_four_curves() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, _, _) = prepared(dir.path());
    let out = dir.path().join("km");
    ok(&["km", "--in", s(&csv), "--stratify", "time_of_day", "--out", s(&out), "--svg"]);
    let groups = std::fs::read_to_string(out.join("groups.csv")).unwrap();
    assert_eq!(groups.lines().count(), 5);
    for k in 0..4 {
        let curve = std::fs::read_to_string(out.join(format!("km_{k}.csv"))).unwrap();
        assert!(curve.starts_with("time,survival\n0,1\n"));
    }
    assert_eq!(std::fs::read_to_string(out.join("logrank.csv")).unwrap().lines().count(), 7);
    assert!(out.join("km.svg").is_file());
}

#[test]
fn identical_runs_give_identical_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, data, cfg) = prepared(dir.path());
    let csv2 = dir.path().join("again.csv");
    let synth_cfg = dir.path().join("synth.toml");
    ok(&["synth", "--config", s(&synth_cfg), "--out", s(&csv2)]);
    assert_eq!(std::fs::read(&csv).unwrap(), std::fs::read(&csv2).unwrap());

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["--seed", "3", "fit", "--model", "fact", "--data", s(&data), "--config", s(&cfg), "--out", s(out)]);
    }
    for f in ["metrics.csv", "history.csv", "summary.csv", "attention.csv", "frailty.csv", "report.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(std::fs::read(a.join("model.ckpt")).unwrap(), std::fs::read(b.join("model.ckpt")).unwrap());
    let m = RunManifest::read(&a.join("manifest.json")).unwrap();
    assert_eq!(m.seed, Some(3));
}

#[test]
fn seed_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let synth_cfg = dir.path().join("synth.toml");
    std::fs::write(&synth_cfg, SMALL_SYNTH).unwrap();
    let csv = dir.path().join("d.csv");
    let out = Command::new(env!("CARGO_BIN_EXE_factsurv"))
        .args(["synth", "--config", s(&synth_cfg), "--out", s(&csv)])
        .env("FACT_SEED", "77")
        .output()
        .unwrap();
    assert!(out.status.success());
    let m = RunManifest::read(&dir.path().join("d.manifest.json")).unwrap();
    assert_eq!(m.seed, Some(77));
    assert_eq!(m.resolved_config["seed"], 77);
}

#[test]
fn checkpoint_of_other_feature_width_is_a_config_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data, cfg) = prepared(dir.path());
    let run = dir.path().join("fit");
    ok(&["fit", "--model", "coxph", "--data", s(&data), "--config", s(&cfg), "--out", s(&run)]);

    // Same directory layout, but the test windows carry fewer covariates.
    let narrow = dir.path().join("narrow");
    std::fs::create_dir_all(&narrow).unwrap();
    for f in ["scaler.json", "train.cache", "val.cache", "prep.json"] {
        std::fs::copy(data.join(f), narrow.join(f)).unwrap();
    }
    let (header, windows) = load_cache(&data.join("test.cache")).unwrap();
    let cols: Vec<usize> = (0..10).collect();
    let cut: Vec<_> = windows.iter().map(|w| w.select_features(&cols).unwrap()).collect();
    save_cache(&narrow.join("test.cache"), &cut, &header.feature_names[..10]).unwrap();

    let ev = dir.path().join("eval");
    let out = factsurv(&["eval", "--model", s(&run.join("model.ckpt")), "--data", s(&narrow), "--out", s(&ev)]);
    assert_eq!(out.status.code(), Some(6));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with("error[config-mismatch]: "));
    let m = RunManifest::read(&ev.join("manifest.json")).unwrap();
    assert_eq!(m.status, "error");
    assert_eq!(m.error.unwrap().exit_code, 6);
}

#[test]
fn failures_have_distinct_codes_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let out_dir = dir.path().join("km");
    let out = factsurv(&["km", "--in", s(&missing), "--stratify", "fare", "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(RunManifest::read(&out_dir.join("manifest.json")).unwrap().error.is_some());

    let bad_cfg = dir.path().join("bad.toml");
    std::fs::write(&bad_cfg, "[training]\nlearning_rate = 0.1\n").unwrap();
    let out = factsurv(&[
        "fit",
        "--model",
        "fact",
        "--data",
        s(dir.path()),
        "--config",
        s(&bad_cfg),
        "--out",
        s(&dir.path().join("f")),
    ]);
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[config]: "));

    let bad_csv = dir.path().join("bad.csv");
    std::fs::write(&bad_csv, "a,b\n1,2\n").unwrap();
    let out = factsurv(&["prep", "--in", s(&bad_csv), "--out", s(&dir.path().join("p"))]);
    assert_eq!(out.status.code(), Some(4));

    let out = factsurv(&["prep", "--in", s(&bad_csv), "--split", "0.5,0.5", "--out", s(&dir.path().join("p"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = factsurv(&["fit", "--model", "nonsense", "--data", ".", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn attention_and_grid_and_ablate_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data, cfg) = prepared(dir.path());
    let run = dir.path().join("fit");
    ok(&["fit", "--model", "transformer-cox", "--data", s(&data), "--config", s(&cfg), "--out", s(&run)]);
    let att = dir.path().join("att.csv");
    ok(&["attention", "--model", s(&run.join("model.ckpt")), "--data", s(&data), "--out", s(&att), "--layer", "0"]);
    let text = std::fs::read_to_string(&att).unwrap();
    let weights: Vec<f64> = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(weights.len(), 5);
    assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(dir.path().join("att.manifest.json").is_file());

    let spec = dir.path().join("grid.toml");
    std::fs::write(&spec, "n_heads = [2, 3]\nfrailty_dim = [2]\nn_layers = [1]\nhidden_dim = [4]\n").unwrap();
    let g = dir.path().join("grid");
    ok(&["grid", "--spec", s(&spec), "--data", s(&data), "--config", s(&cfg), "--out", s(&g)]);
    let grid = std::fs::read_to_string(g.join("grid.csv")).unwrap();
    let rows: Vec<&str> = grid.lines().collect();
    assert_eq!(rows.len(), 3);
    // d = 4 is not divisible by 3 heads, so that cell fails and ranks last.
    assert!(rows[2].starts_with("2,3,"), "{grid}");
    assert!(!rows[2].ends_with(','));

    let ab = dir.path().join("ablate");
    let one_epoch = dir.path().join("one.toml");
    std::fs::write(&one_epoch, FAST_TRAIN.replace("max_epochs = 2", "max_epochs = 1")).unwrap();
    ok(&["ablate", "--config", s(&one_epoch), "--data", s(&data), "--out", s(&ab)]);
    let table = std::fs::read_to_string(ab.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 7);
    assert!(table.contains("\nno-history,"));
}
