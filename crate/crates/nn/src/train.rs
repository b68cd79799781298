//! Training, evaluation and seed repetition.
//!
//! Neural models (and the linear model when asked) minimize the batched
//! Cox loss with Adam. Each batch's loss is divided by its number of
//! events so the step size does not depend on the censoring rate; batches
//! without events carry no likelihood and are skipped. After every epoch
//! the validation C-index decides which parameters to keep.

use std::time::Instant;

use factsurv_autodiff::{adam_step, AdamConfig, AdamState, Graph, Tensor, Xoshiro256};
use factsurv_core::coxph::{breslow_from_arrays, BaselineHazard, fit_coxph_matrix, DEFAULT_MAX_ITER, DEFAULT_TOL};
use factsurv_core::data::features::{group_columns, records_to_events, histories, FeatureGroup, Scaler, N_FEATURES};
use factsurv_core::data::record::RawRecord;
use factsurv_core::data::window::{build_windows, chronological_split, Split, WindowSample};
use factsurv_core::metrics::{self, EvalContext, EvalReport, DEFAULT_QUANTILES};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, NnError, Result};
use crate::loss::{cox_nll, RiskSetBatch};
use crate::model::{DriverIndex, FactConfig, ModelKind, RiskModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Adam,
    /// Full-batch Newton-Raphson on the whole training split; linear only.
    Newton,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Historical events per window, `h`. Sequences have `h + 1` rows.
    pub lookback: usize,
    pub n_heads: usize,
    pub frailty_dim: usize,
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub flatten_window: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::Fact,
            lookback: 20,
            n_heads: 2,
            frailty_dim: 4,
            n_layers: 2,
            hidden_dim: 16,
            dropout: 0.0,
            flatten_window: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub lr: f64,
    /// Learning rate of the frailty table; `lr` when absent.
    pub frailty_lr: Option<f64>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// When false every run lasts exactly `max_epochs`.
    pub early_stopping: bool,
    pub seeds: Vec<u64>,
    pub solver: Solver,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            frailty_lr: Some(0.03),
            batch_size: 256,
            max_epochs: 12,
            patience: 3,
            early_stopping: true,
            seeds: vec![1, 2, 3],
            solver: Solver::Adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureSection {
    pub groups: Vec<FeatureGroup>,
}

impl Default for FeatureSection {
    fn default() -> Self {
        Self {
            groups: FeatureGroup::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelSection,
    pub training: TrainingSection,
    pub features: FeatureSection,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| NnError::Format(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.training;
        if t.patience == 0 {
            return Err(invalid("patience must be at least 1"));
        }
        if t.seeds.is_empty() {
            return Err(invalid("at least one seed is required"));
        }
        if t.batch_size == 0 || t.max_epochs == 0 {
            return Err(invalid("batch_size and max_epochs must be at least 1"));
        }
        if !(t.lr >= 0.0 && t.lr.is_finite()) || t.frailty_lr.is_some_and(|r| !(r >= 0.0 && r.is_finite())) {
            return Err(invalid("learning rates must be finite and non-negative"));
        }
        if t.solver == Solver::Newton && self.model.kind != ModelKind::Linear {
            return Err(invalid("the newton solver only fits the linear model"));
        }
        self.feature_columns()?;
        Ok(())
    }

    /// Covariate columns of the enabled feature groups.
    pub fn feature_columns(&self) -> Result<Vec<usize>> {
        let cols = group_columns(&self.features.groups);
        if cols.is_empty() {
            return Err(invalid("no feature groups enabled"));
        }
        Ok(cols)
    }

    pub fn seq_len(&self) -> usize {
        self.model.lookback + 1
    }

    /// Short stable hash of the resolved configuration.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(&digest[..8])
    }

    fn fact_config(&self, n_features: usize, n_drivers: usize) -> FactConfig {
        let m = &self.model;
        FactConfig {
            n_heads: m.n_heads,
            frailty_dim: m.frailty_dim,
            n_layers: m.n_layers,
            hidden_dim: m.hidden_dim,
            seq_len: self.seq_len(),
            n_features,
            n_drivers,
            dropout: m.dropout,
            flatten_window: m.flatten_window,
        }
    }
}

/// Scaled windows split chronologically.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub split: Split,
    pub scaler: Scaler,
}

/// Records to scaled, left-padded windows of `lookback + 1` rows, split
/// chronologically; the scaler sees the training split only.
pub fn prepare_records(records: &[RawRecord], lookback: usize, fractions: [f64; 3]) -> Result<Prepared> {
    let events = records_to_events(records);
    let mut windows = Vec::new();
    for h in histories(&events) {
        windows.extend(build_windows(h, lookback + 1, true)?);
    }
    let mut split = chronological_split(windows, fractions)?;
    let scaler = Scaler::fit_windows(&split.train)?;
    scaler.apply_windows(&mut split.train)?;
    scaler.apply_windows(&mut split.val)?;
    scaler.apply_windows(&mut split.test)?;
    Ok(Prepared { split, scaler })
}

/// Cuts windows down to `seq_len` rows and the given covariate columns.
pub fn select_windows(windows: &[WindowSample], seq_len: usize, cols: &[usize]) -> Result<Vec<WindowSample>> {
    let all = cols.len() == windows.first().map_or(0, |w| w.n_features) && cols.iter().enumerate().all(|(i, &c)| i == c);
    windows
        .iter()
        .map(|w| {
            if seq_len > w.seq_len() {
                return Err(NnError::ConfigMismatch(format!(
                    "model needs {} rows per window, data has {}",
                    seq_len,
                    w.seq_len()
                )));
            }
            let t = if seq_len == w.seq_len() { w.clone() } else { w.truncated(seq_len)? };
            Ok(if all { t } else { t.select_features(cols)? })
        })
        .collect()
}

/// Windows reshaped for `cfg`, both the feature groups and the lookback.
pub fn windows_for(cfg: &TrainConfig, windows: &[WindowSample]) -> Result<Vec<WindowSample>> {
    if let Some(w) = windows.first() {
        if w.n_features != N_FEATURES {
            return Err(NnError::ConfigMismatch(format!(
                "expected {N_FEATURES} covariates per row, data has {}",
                w.n_features
            )));
        }
    }
    select_windows(windows, cfg.seq_len(), &cfg.feature_columns()?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-event training loss over the epoch's batches.
    pub train_loss: f64,
    pub val_c_index: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: RiskModel,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_c_index: f64,
}

fn columns(windows: &[WindowSample]) -> (Vec<f64>, Vec<bool>) {
    (windows.iter().map(|w| w.duration).collect(), windows.iter().map(|w| w.event).collect())
}

/// Validation C-index of `model`.
pub fn validation_c_index(model: &RiskModel, val: &[WindowSample]) -> Result<f64> {
    let scores = model.score(val)?;
    let (d, e) = columns(val);
    Ok(metrics::c_index(&scores.risks, &d, &e)?)
}

/// Trains one model on windows already shaped by [`windows_for`].
pub fn train(cfg: &TrainConfig, seed: u64, train: &[WindowSample], val: &[WindowSample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = train.first().ok_or_else(|| invalid("empty training split"))?;
    if val.is_empty() {
        return Err(invalid("empty validation split"));
    }
    let kind = cfg.model.kind;
    let drivers = if kind.has_frailty() {
        DriverIndex::from_windows(train)
    } else {
        DriverIndex::default()
    };
    let fc = cfg.fact_config(first.n_features, drivers.len());
    let mut model = RiskModel::new(kind, fc, drivers, seed)?;
    if cfg.training.solver == Solver::Newton {
        return train_newton(model, train, val);
    }

    let t = &cfg.training;
    // The frailty table is always the last parameter.
    let split_at = if kind.has_frailty() { model.params.len() - 1 } else { model.params.len() };
    let main_cfg = AdamConfig { lr: t.lr, ..AdamConfig::default() };
    let frailty_cfg = AdamConfig {
        lr: t.frailty_lr.unwrap_or(t.lr),
        ..AdamConfig::default()
    };
    let mut main_state = AdamState::new(&model.params[..split_at]);
    let mut frailty_state = AdamState::new(&model.params[split_at..]);

    let mut rng = Xoshiro256::new(seed).split(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    let mut stale = 0;
    for epoch in 1..=t.max_epochs {
        let started = Instant::now();
        rng.shuffle(&mut order);
        let (mut loss_sum, mut n_batches) = (0.0, 0usize);
        for (step, idx) in order.chunks(t.batch_size).enumerate() {
            let windows: Vec<&WindowSample> = idx.iter().map(|&i| &train[i]).collect();
            let rs = RiskSetBatch::new(
                windows.iter().map(|w| w.duration).collect(),
                windows.iter().map(|w| w.event).collect(),
            )?;
            let n_events = rs.n_events();
            if n_events == 0 {
                continue;
            }
            let batch = model.batch(&windows)?;
            let mut g = Graph::new();
            g.set_training(true);
            let fwd = model.forward(&mut g, &batch, &mut rng).map_err(|e| failure(epoch, step, e))?;
            let nll = cox_nll(&mut g, fwd.risks, &rs)?;
            let loss = g.scale(nll, 1.0 / n_events as f64);
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(failure(epoch, step, format!("loss is {value}")));
            }
            let grads = g.backward(loss)?.param_grads(&model.params);
            if grads.iter().flatten().any(|v| !v.is_finite()) {
                return Err(failure(epoch, step, "non-finite gradient"));
            }
            adam_step(&mut model.params[..split_at], &grads[..split_at], &mut main_state, &main_cfg)?;
            if split_at < model.params.len() {
                adam_step(&mut model.params[split_at..], &grads[split_at..], &mut frailty_state, &frailty_cfg)?;
            }
            loss_sum += value;
            n_batches += 1;
        }
        let val_c = validation_c_index(&model, val).map_err(|e| failure(epoch, 0, e))?;
        let train_loss = if n_batches == 0 { f64::NAN } else { loss_sum / n_batches as f64 };
        log::info!(
            "{} epoch {epoch}: loss {train_loss:.5} val C {val_c:.4} ({:.1}s)",
            kind.name(),
            started.elapsed().as_secs_f64()
        );
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_c_index: val_c,
        });
        if best.as_ref().is_none_or(|b| val_c > b.1) {
            best = Some((epoch, val_c, model.params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if t.early_stopping && stale >= t.patience {
                break;
            }
        }
    }
    let (best_epoch, best_val_c_index, params) = best.expect("at least one epoch ran");
    model.params = params;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_c_index,
    })
}

fn failure(epoch: usize, step: usize, e: impl ToString) -> NnError {
    NnError::TrainingFailure {
        epoch,
        step,
        message: e.to_string(),
    }
}

fn train_newton(mut model: RiskModel, train: &[WindowSample], val: &[WindowSample]) -> Result<TrainOutcome> {
    let refs: Vec<&WindowSample> = train.iter().collect();
    let batch = model.batch(&refs)?;
    let k = batch.x.shape()[1];
    let rows: Vec<&[f64]> = batch.x.data().chunks(k).collect();
    let (d, e) = columns(train);
    let fit = fit_coxph_matrix(&rows, &d, &e, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
    if !fit.converged {
        log::warn!("newton fit stopped after {} iterations", fit.n_iterations);
    }
    model.params[0] = Tensor::from_vec(vec![k, 1], fit.beta)?.trainable();
    let val_c = validation_c_index(&model, val)?;
    Ok(TrainOutcome {
        model,
        history: vec![EpochRecord {
            epoch: 1,
            train_loss: -fit.log_likelihood / e.iter().filter(|&&x| x).count().max(1) as f64,
            val_c_index: val_c,
        }],
        best_epoch: 1,
        best_val_c_index: val_c,
    })
}

/// Breslow baseline hazard from the model's risks on the training split.
pub fn fit_baseline(model: &RiskModel, train: &[WindowSample]) -> Result<BaselineHazard> {
    let r = model.score(train)?.risks;
    let (d, e) = columns(train);
    Ok(breslow_from_arrays(&d, &e, &r)?)
}

/// Test metrics with a Breslow baseline fit on the training risks.
pub fn evaluate(
    model: &RiskModel,
    train: &[WindowSample],
    test: &[WindowSample],
    seed: u64,
    fingerprint: &str,
) -> Result<EvalReport> {
    let baseline = fit_baseline(model, train)?;
    evaluate_with(model, test, &baseline, seed, fingerprint)
}

/// Test metrics under a given baseline hazard.
pub fn evaluate_with(
    model: &RiskModel,
    test: &[WindowSample],
    baseline: &BaselineHazard,
    seed: u64,
    fingerprint: &str,
) -> Result<EvalReport> {
    let risks = model.score(test)?.risks;
    let (d, e) = columns(test);
    let ctx = EvalContext {
        model: model.kind.name(),
        seed,
        config_fingerprint: fingerprint,
        quantiles: &DEFAULT_QUANTILES,
    };
    Ok(metrics::evaluate(&risks, &d, &e, baseline, &ctx)?)
}

/// One training run per seed of the config, evaluated on `test`.
pub fn run_seeds(cfg: &TrainConfig, split: &Split) -> Result<Vec<(TrainOutcome, EvalReport)>> {
    let train_w = windows_for(cfg, &split.train)?;
    let val_w = windows_for(cfg, &split.val)?;
    let test_w = windows_for(cfg, &split.test)?;
    let fp = cfg.fingerprint();
    cfg.training
        .seeds
        .iter()
        .map(|&seed| {
            let out = train(cfg, seed, &train_w, &val_w)?;
            let report = evaluate(&out.model, &train_w, &test_w, seed, &fp)?;
            Ok((out, report))
        })
        .collect()
}

/// Mean and sample standard deviation (zero for one value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
