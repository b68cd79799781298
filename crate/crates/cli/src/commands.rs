//! One function per subcommand. Each fills in the manifest as it goes so
//! a failed run still records what it was asked to do.

use std::path::{Path, PathBuf};

use factsurv_core::data::features::Scaler;
use factsurv_core::data::record::{ingest_csv, write_csv_file};
use factsurv_core::data::synth::{synth_generate, SynthConfig};
use factsurv_core::data::window::{Split, WindowSample};
use factsurv_core::metrics::EvalReport;
use factsurv_core::survival::{kaplan_meier, logrank_test, stratify, StratRule};
use factsurv_nn::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use factsurv_nn::search::{ablation_run, attention_profile, grid_search, GridSpec, Scenario};
use factsurv_nn::train::{
    evaluate_with, fit_baseline, mean_sd, prepare_records, train, windows_for, TrainConfig, TrainOutcome,
};
use factsurv_nn::RiskModel;

use crate::args::*;
use crate::dataset::{self, PrepInfo, PREP_FORMAT_VERSION};
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;
use crate::output::{num, opt_num, read_text, write_text, Table};
use crate::svg::survival_plot;

fn to_json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("settings serialize")
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)))
    }
}

/// `<dir>/<stem>.<suffix>` next to a file output.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn synth(args: &SynthArgs, seed: Option<u64>, m: &mut RunManifest) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => {
            m.add_input(p)?;
            SynthConfig::from_toml(&read_text(p)?).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    m.seed = Some(cfg.seed);
    m.resolved_config = to_json(&cfg);
    let (records, truth) = synth_generate(&cfg)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_csv_file(&args.out, &records)?;
    m.add_output(&args.out);
    let truth_path = sibling(&args.out, "truth.json");
    truth.save(&truth_path)?;
    m.add_output(&truth_path);
    log::info!("wrote {} records to {}", records.len(), args.out.display());
    Ok(())
}

pub fn parse_fractions(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("--split expects three comma-separated numbers, got `{s}`")))?;
    let [a, b, c] = parts[..] else {
        return Err(CliError::Usage(format!("--split expects three fractions, got {}", parts.len())));
    };
    if [a, b, c].iter().any(|v| !(*v >= 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(CliError::Usage(format!("--split fractions must be non-negative and sum to 1, got `{s}`")));
    }
    Ok([a, b, c])
}

pub fn prep(args: &PrepArgs, m: &mut RunManifest) -> Result<()> {
    let fractions = parse_fractions(&args.split)?;
    m.resolved_config = serde_json::json!({ "lookback": args.lookback, "split": fractions });
    require_file(&args.input)?;
    m.add_input(&args.input)?;
    let records = ingest_csv(&args.input)?;
    let prepared = prepare_records(&records, args.lookback, fractions)?;
    let s = &prepared.split;
    let info = PrepInfo {
        format_version: PREP_FORMAT_VERSION,
        lookback: args.lookback,
        fractions,
        n_records: records.len(),
        n_train: s.train.len(),
        n_val: s.val.len(),
        n_test: s.test.len(),
        feature_names: factsurv_core::data::features::FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
    };
    for p in dataset::save_prepared(&args.out, &info, s, &prepared.scaler)? {
        m.add_output(&p);
    }
    log::info!("windows: train {} val {} test {}", info.n_train, info.n_val, info.n_test);
    Ok(())
}

pub fn km(args: &KmArgs, m: &mut RunManifest) -> Result<()> {
    let rule: StratRule = args.stratify.parse().map_err(|e| CliError::Usage(format!("--stratify: {e}")))?;
    m.resolved_config = serde_json::json!({ "stratify": args.stratify, "svg": args.svg });
    require_file(&args.input)?;
    m.add_input(&args.input)?;
    let records = ingest_csv(&args.input)?;
    let strata = stratify(&records, &rule);
    create_dir(&args.out)?;

    let columns = |idx: &[usize]| -> (Vec<f64>, Vec<bool>) {
        (
            idx.iter().map(|&i| records[i].idle_duration).collect(),
            idx.iter().map(|&i| records[i].outcome.is_event()).collect(),
        )
    };
    let mut groups = Table::new(&["group", "label", "n", "n_events", "file"]);
    let mut curves = Vec::new();
    for (k, (label, idx)) in strata.iter().enumerate() {
        let (d, e) = columns(idx);
        let file = format!("km_{k}.csv");
        let n_events = e.iter().filter(|&&x| x).count();
        if idx.is_empty() {
            log::warn!("stratum `{label}` is empty");
            groups.push(vec![k.to_string(), label.clone(), "0".into(), "0".into(), String::new()]);
            continue;
        }
        let curve = kaplan_meier(&d, &e)?;
        let mut t = Table::new(&["time", "survival"]);
        t.push(vec![num(0.0), num(curve.left_value())]);
        for (&x, &s) in curve.knots().iter().zip(curve.values()) {
            t.push(vec![num(x), num(s)]);
        }
        let p = args.out.join(&file);
        t.write(&p)?;
        m.add_output(&p);
        groups.push(vec![k.to_string(), label.clone(), idx.len().to_string(), n_events.to_string(), file]);
        curves.push((label.clone(), curve));
    }
    let p = args.out.join("groups.csv");
    groups.write(&p)?;
    m.add_output(&p);

    let mut lr = Table::new(&["group_a", "group_b", "observed_a", "expected_a", "chi2", "p_value"]);
    for a in 0..strata.len() {
        for b in a + 1..strata.len() {
            if strata[a].1.is_empty() || strata[b].1.is_empty() {
                continue;
            }
            let (da, ea) = columns(&strata[a].1);
            let (db, eb) = columns(&strata[b].1);
            match logrank_test(&da, &ea, &db, &eb) {
                Ok(t) => lr.push(vec![
                    strata[a].0.clone(),
                    strata[b].0.clone(),
                    num(t.observed_a),
                    num(t.expected_a),
                    num(t.chi2),
                    num(t.p_value),
                ]),
                Err(e) => log::warn!("log-rank {} vs {}: {e}", strata[a].0, strata[b].0),
            }
        }
    }
    let p = args.out.join("logrank.csv");
    lr.write(&p)?;
    m.add_output(&p);

    if args.svg {
        let p = args.out.join("km.svg");
        write_text(&p, &survival_plot(&curves, "idle minutes"))?;
        m.add_output(&p);
    }
    Ok(())
}

/// Training config from an optional file, with the seed override applied.
fn load_train_config(path: Option<&Path>, seed: Option<u64>, m: &mut RunManifest) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => {
            m.add_input(p)?;
            TrainConfig::from_toml(&read_text(p)?).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.training.seeds = vec![s];
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

fn check_lookback(cfg: &TrainConfig, info: &PrepInfo) -> Result<()> {
    if cfg.model.lookback > info.lookback {
        return Err(CliError::Nn(factsurv_nn::NnError::ConfigMismatch(format!(
            "config lookback {} exceeds the prepared lookback {}",
            cfg.model.lookback, info.lookback
        ))));
    }
    Ok(())
}

fn report_values(r: &EvalReport) -> Vec<f64> {
    let mut row = vec![r.c_index_integrated];
    row.extend(&r.c_index_at);
    row.extend(&r.brier_at);
    row.push(r.ibs);
    row
}

fn report_header(r: &EvalReport) -> Vec<String> {
    let q = |v: f64| (v * 100.0).round() as i64;
    let mut h = vec!["c_index_integrated".to_string()];
    h.extend(r.quantiles.iter().map(|&v| format!("c_index_q{}", q(v))));
    h.extend(r.quantiles.iter().map(|&v| format!("brier_q{}", q(v))));
    h.push("ibs".into());
    h
}

fn attention_table(model: &RiskModel, windows: &[WindowSample], layer: Option<usize>) -> Result<Table> {
    let profile = attention_profile(model, windows, layer)?;
    let l = profile.len();
    let mut t = Table::new(&["position", "lag", "weight"]);
    for (pos, w) in profile.into_iter().enumerate() {
        t.push(vec![pos.to_string(), (l - 1 - pos).to_string(), num(w)]);
    }
    Ok(t)
}

pub fn fit(args: &FitArgs, seed: Option<u64>, m: &mut RunManifest) -> Result<()> {
    let mut cfg = load_train_config(args.config.as_deref(), seed, m)?;
    cfg.model.kind = args.model.kind();
    cfg.training.solver = args.model.solver();
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    m.resolved_config = to_json(&cfg);
    m.seed = cfg.training.seeds.first().copied();

    let info = dataset::read_info(&args.data)?;
    check_lookback(&cfg, &info)?;
    m.add_input(&args.data)?;
    let scaler = dataset::load_scaler(&args.data)?;
    let split = dataset::load_all(&args.data)?;
    let train_w = windows_for(&cfg, &split.train)?;
    let val_w = windows_for(&cfg, &split.val)?;
    let test_w = windows_for(&cfg, &split.test)?;

    create_dir(&args.out)?;
    let config_path = args.out.join("config.toml");
    write_text(&config_path, &cfg.to_toml())?;
    m.add_output(&config_path);

    let fp = cfg.fingerprint();
    let mut runs: Vec<(u64, TrainOutcome, EvalReport, CheckpointMeta)> = Vec::new();
    for &s in &cfg.training.seeds {
        let out = train(&cfg, s, &train_w, &val_w)?;
        let baseline = fit_baseline(&out.model, &train_w)?;
        let report = evaluate_with(&out.model, &test_w, &baseline, s, &fp)?;
        log::info!(
            "seed {s}: best epoch {} val C {:.4} test C {:.4}",
            out.best_epoch,
            out.best_val_c_index,
            report.c_index_integrated
        );
        let meta = CheckpointMeta {
            seed: s,
            feature_columns: cfg.feature_columns()?,
            scaler: Some(scaler.clone()),
            baseline: Some(baseline),
            train_config: Some(to_json(&cfg)),
            epochs_trained: out.history.len(),
        };
        let ckpt = args.out.join(format!("model-seed{s}.ckpt"));
        save_checkpoint(&ckpt, &out.model, &meta)?;
        m.add_output(&ckpt);
        let rep = args.out.join(format!("report-seed{s}.txt"));
        write_text(&rep, &report.to_text())?;
        m.add_output(&rep);
        runs.push((s, out, report, meta));
    }

    // Per-seed metrics and the seed summary.
    let mut header = vec!["seed".to_string(), "best_epoch".into(), "val_c_index".into()];
    header.extend(report_header(&runs[0].2));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut metrics = Table::new(&header_refs);
    let mut history = Table::new(&["seed", "epoch", "train_loss", "val_c_index"]);
    let mut values: Vec<Vec<f64>> = Vec::new();
    for (s, out, report, _) in &runs {
        let mut v = vec![out.best_val_c_index];
        v.extend(report_values(report));
        let mut row = vec![s.to_string(), out.best_epoch.to_string()];
        row.extend(v.iter().map(|&x| num(x)));
        metrics.push(row);
        values.push(v);
        for h in &out.history {
            history.push(vec![s.to_string(), h.epoch.to_string(), num(h.train_loss), num(h.val_c_index)]);
        }
    }
    let mut summary = Table::new(&["metric", "mean", "sd"]);
    for (k, name) in header.iter().enumerate().skip(2) {
        let vals: Vec<f64> = values.iter().map(|v| v[k - 2]).collect();
        let (mean, sd) = mean_sd(&vals);
        summary.push(vec![name.clone(), num(mean), num(sd)]);
    }
    for (name, t) in [("metrics.csv", &metrics), ("history.csv", &history), ("summary.csv", &summary)] {
        let p = args.out.join(name);
        t.write(&p)?;
        m.add_output(&p);
    }

    // The seed with the best validation C-index becomes the run's model.
    let best = runs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.best_val_c_index.total_cmp(&b.1 .1.best_val_c_index).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .expect("at least one seed");
    let (_, out, report, meta) = &runs[best];
    let ckpt = args.out.join("model.ckpt");
    save_checkpoint(&ckpt, &out.model, meta)?;
    m.add_output(&ckpt);
    let rep = args.out.join("report.txt");
    write_text(&rep, &report.to_text())?;
    m.add_output(&rep);

    if out.model.kind.is_sequence() {
        let p = args.out.join("attention.csv");
        attention_table(&out.model, &test_w, None)?.write(&p)?;
        m.add_output(&p);
    }
    if let Some(contrib) = out.model.frailty_contribution() {
        let mut t = Table::new(&["driver_id", "contribution"]);
        for (id, v) in contrib {
            t.push(vec![id, num(v)]);
        }
        let p = args.out.join("frailty.csv");
        t.write(&p)?;
        m.add_output(&p);
    }
    Ok(())
}

/// A checkpoint with its training config, ready for prepared windows.
struct Loaded {
    model: RiskModel,
    meta: CheckpointMeta,
    cfg: TrainConfig,
}

fn load_model(path: &Path, m: &mut RunManifest) -> Result<Loaded> {
    require_file(path)?;
    m.add_input(path)?;
    let (model, meta) = load_checkpoint(path)?;
    let cfg: TrainConfig = match &meta.train_config {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| CliError::Config(format!("{}: stored config: {e}", path.display())))?,
        None => {
            return Err(CliError::Config(format!(
                "{}: checkpoint has no training config",
                path.display()
            )))
        }
    };
    m.seed = Some(meta.seed);
    Ok(Loaded { model, meta, cfg })
}

fn check_scaler(meta: &CheckpointMeta, data: &Path) -> Result<()> {
    if let Some(s) = &meta.scaler {
        let on_disk: Scaler = dataset::load_scaler(data)?;
        if &on_disk != s {
            log::warn!("the data were scaled differently from the checkpoint's training data");
        }
    }
    Ok(())
}

fn shaped(l: &Loaded, windows: &[WindowSample]) -> Result<Vec<WindowSample>> {
    let w = windows_for(&l.cfg, windows)?;
    if let Some(first) = w.first() {
        if first.n_features != l.model.config.n_features {
            return Err(CliError::Nn(factsurv_nn::NnError::ConfigMismatch(format!(
                "checkpoint expects {} covariates, data give {}",
                l.model.config.n_features, first.n_features
            ))));
        }
    }
    Ok(w)
}

pub fn eval(args: &EvalArgs, m: &mut RunManifest) -> Result<()> {
    m.resolved_config = serde_json::json!({ "split": args.split.name() });
    let l = load_model(&args.model, m)?;
    let info = dataset::read_info(&args.data)?;
    check_lookback(&l.cfg, &info)?;
    m.add_input(&args.data.join(dataset::cache_file(args.split)))?;
    check_scaler(&l.meta, &args.data)?;
    let data = shaped(&l, &dataset::load_split(&args.data, args.split)?)?;
    let baseline = match &l.meta.baseline {
        Some(b) => b.clone(),
        None => fit_baseline(&l.model, &shaped(&l, &dataset::load_split(&args.data, SplitArg::Train)?)?)?,
    };
    let report = evaluate_with(&l.model, &data, &baseline, l.meta.seed, &l.cfg.fingerprint())?;
    report.validate()?;
    create_dir(&args.out)?;
    let p = args.out.join("report.txt");
    write_text(&p, &report.to_text())?;
    m.add_output(&p);
    let mut t = Table::new(&["metric", "value"]);
    for (k, v) in report_header(&report).into_iter().zip(report_values(&report).into_iter().map(num)) {
        t.push(vec![k, v]);
    }
    for (k, h) in report.quantiles.iter().zip(&report.horizons) {
        t.push(vec![format!("horizon_q{}", (k * 100.0).round() as i64), num(*h)]);
    }
    t.push(vec!["tau".into(), num(report.tau)]);
    t.push(vec!["n_samples".into(), report.n_samples.to_string()]);
    let p = args.out.join("metrics.csv");
    t.write(&p)?;
    m.add_output(&p);
    Ok(())
}

pub fn grid(args: &GridArgs, seed: Option<u64>, m: &mut RunManifest) -> Result<()> {
    require_file(&args.spec)?;
    m.add_input(&args.spec)?;
    let spec = GridSpec::from_toml(&read_text(&args.spec)?)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.spec.display())))?;
    let cfg = load_train_config(args.config.as_deref(), seed, m)?;
    m.resolved_config = serde_json::json!({ "grid": to_json(&spec), "base": to_json(&cfg) });
    m.seed = cfg.training.seeds.first().copied();
    let info = dataset::read_info(&args.data)?;
    check_lookback(&cfg, &info)?;
    m.add_input(&args.data)?;
    let split = dataset::load_all(&args.data)?;
    let train_w = windows_for(&cfg, &split.train)?;
    let val_w = windows_for(&cfg, &split.val)?;
    let cells = grid_search(&spec, &cfg, &train_w, &val_w)?;
    create_dir(&args.out)?;
    let mut t = Table::new(&["rank", "n_heads", "frailty_dim", "n_layers", "hidden_dim", "val_c_index", "error"]);
    for (i, c) in cells.iter().enumerate() {
        t.push(vec![
            (i + 1).to_string(),
            c.n_heads.to_string(),
            c.frailty_dim.to_string(),
            c.n_layers.to_string(),
            c.hidden_dim.to_string(),
            opt_num(c.val_c_index),
            c.error.clone().unwrap_or_default(),
        ]);
    }
    let p = args.out.join("grid.csv");
    t.write(&p)?;
    m.add_output(&p);
    Ok(())
}

pub fn ablate(args: &AblateArgs, seed: Option<u64>, m: &mut RunManifest) -> Result<()> {
    let cfg = load_train_config(args.config.as_deref(), seed, m)?;
    let scenarios = Scenario::standard();
    m.resolved_config = serde_json::json!({ "base": to_json(&cfg), "scenarios": to_json(&scenarios) });
    m.seed = cfg.training.seeds.first().copied();
    let info = dataset::read_info(&args.data)?;
    check_lookback(&cfg, &info)?;
    m.add_input(&args.data)?;
    let split: Split = dataset::load_all(&args.data)?;
    let rows = ablation_run(&cfg, &scenarios, &split)?;
    create_dir(&args.out)?;
    let mut t = Table::new(&[
        "scenario",
        "fact_mean",
        "fact_sd",
        "transformer_mean",
        "transformer_sd",
        "errors",
    ]);
    for r in rows {
        t.push(vec![
            r.scenario,
            opt_num(r.with_embedding.map(|x| x.0)),
            opt_num(r.with_embedding.map(|x| x.1)),
            opt_num(r.without_embedding.map(|x| x.0)),
            opt_num(r.without_embedding.map(|x| x.1)),
            r.errors.join("; "),
        ]);
    }
    let p = args.out.join("ablation.csv");
    t.write(&p)?;
    m.add_output(&p);
    Ok(())
}

pub fn attention(args: &AttentionArgs, m: &mut RunManifest) -> Result<()> {
    m.resolved_config = serde_json::json!({ "split": args.split.name(), "layer": args.layer });
    let l = load_model(&args.model, m)?;
    let info = dataset::read_info(&args.data)?;
    check_lookback(&l.cfg, &info)?;
    m.add_input(&args.data.join(dataset::cache_file(args.split)))?;
    let data = shaped(&l, &dataset::load_split(&args.data, args.split)?)?;
    let t = attention_table(&l.model, &data, args.layer)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    t.write(&args.out)?;
    m.add_output(&args.out);
    Ok(())
}
