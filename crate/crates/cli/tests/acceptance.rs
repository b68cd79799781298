//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs without the libtest harness so the lines always reach the
//! terminal. `ACCEPTANCE_ONLY=1,4,8` restricts the run to some criteria
//! (criterion 9 needs 5 and runs it when 5 is skipped).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use factsurv_autodiff::{gradcheck_fourth_order, AutodiffError, Graph, Tensor, Xoshiro256};
use factsurv_core::coxph::{fit_coxph, DEFAULT_MAX_ITER, DEFAULT_TOL};
use factsurv_core::data::record::RawRecord;
use factsurv_core::data::synth::{synth_generate, GroundTruth, SynthConfig};
use factsurv_core::data::window::{Split, WindowSample};
use factsurv_core::metrics::{c_index, c_index_truncated, censoring_km, ipcw_brier, EvalReport};
use factsurv_core::survival::{kaplan_meier, logrank_test};
use factsurv_core::IdleEvent;
use factsurv_nn::train::{prepare_records, run_seeds, Solver, TrainConfig};
use factsurv_nn::{cox_nll, cox_nll_naive, cox_nll_value, DriverIndex, FactConfig, ModelKind, RiskModel, RiskSetBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

// Tolerances and budgets.
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_BUDGET_S: f64 = 30.0;
const LOSS_TOL: f64 = 1e-10;
const BRIER_TOL: f64 = 1e-10;
const KM_TOL: f64 = 1e-12;
const COX_BETA_RANGE: (f64, f64) = (0.9, 1.1);
const COX_BUDGET_S: f64 = 10.0;
const CAUSAL_TOL: f64 = 1e-12;
const FACT_MARGIN: f64 = 0.03;
const TRANSFORMER_SLACK: f64 = 0.005;
const ORDERING_BUDGET_S: f64 = 600.0;
const FRAILTY_MIN_RHO: f64 = 0.5;
const FRAILTY_MIN_EVENTS: usize = 20;
const IDENTICAL_CHI2_TOL: f64 = 1e-9;
const HR2_P_MAX: f64 = 0.01;
const REPEAT_TOL: f64 = 1e-12;
const SMOKE_BUDGET_S: f64 = 300.0;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------
// Shared fixtures

fn random_window(rng: &mut Xoshiro256, p: usize, seq_len: usize, n_pad: usize, driver: &str) -> WindowSample {
    let w = p + 2;
    let mut sequence = vec![0.0; seq_len * w];
    let mut pad_mask = vec![false; seq_len];
    for t in 0..seq_len {
        if t < n_pad && t + 1 < seq_len {
            pad_mask[t] = true;
            continue;
        }
        for j in 0..p {
            sequence[t * w + j] = rng.normal();
        }
        if t + 1 < seq_len {
            sequence[t * w + p] = rng.normal();
            sequence[t * w + p + 1] = if rng.uniform() < 0.4 { 1.0 } else { 0.0 };
        }
    }
    WindowSample {
        driver_id: driver.to_string(),
        seq_index: 1,
        n_features: p,
        sequence,
        pad_mask,
        duration: (rng.uniform() * 8.0).round() + 1.0,
        event: rng.uniform() < 0.6,
        target_wall_clock: 0,
    }
}

fn toy_config(seq_len: usize, p: usize) -> FactConfig {
    FactConfig {
        n_heads: 2,
        frailty_dim: 3,
        n_layers: 2,
        hidden_dim: 4,
        seq_len,
        n_features: p,
        n_drivers: 0,
        dropout: 0.0,
        flatten_window: false,
    }
}

/// The benchmark dataset: default generator, lookback 20, 70/15/15.
struct Bench {
    records: Vec<RawRecord>,
    truth: GroundTruth,
    split: Split,
}

fn bench() -> Bench {
    let cfg = SynthConfig::default();
    let (records, truth) = synth_generate(&cfg).expect("synthesize");
    let split = prepare_records(&records, 20, [0.7, 0.15, 0.15]).expect("prepare").split;
    Bench { records, truth, split }
}

// ---------------------------------------------------------------------
// 1. Gradient correctness

/// Parameters whose only effect is a common shift of all scores (or of
/// all attention logits of one query). The loss ignores such shifts, so
/// their exact gradient is zero and is asserted as such.
fn shift_only(name: &str, n_layers: usize) -> bool {
    name == "b3" || name == "head.b" || name.ends_with(".b_k") || name == format!("layer{}.ln2_beta", n_layers - 1)
}

fn gradcheck_kind(kind: ModelKind, seed: u64) -> Result<f64, String> {
    let (b, p, l) = (8, 3, 5);
    let mut rng = Xoshiro256::new(seed);
    let mut windows: Vec<WindowSample> = (0..b)
        .map(|i| {
            let pad = rng.below(l);
            random_window(&mut rng, p, l, pad, &format!("D{}", i % 3))
        })
        .collect();
    windows[0].event = true;
    let mut m = RiskModel::new(kind, toy_config(l, p), DriverIndex::from_windows(&windows), seed).map_err(|e| e.to_string())?;
    // Zero-initialized tables and coefficients get random values so every
    // path carries gradient.
    let mut prng = Xoshiro256::new(seed + 100);
    for t in &mut m.params {
        if t.data().iter().all(|&v| v == 0.0) {
            for v in t.data_mut() {
                *v = 0.5 * prng.normal();
            }
        }
    }
    let refs: Vec<&WindowSample> = windows.iter().collect();
    let batch = m.batch(&refs).map_err(|e| e.to_string())?;
    let rs = RiskSetBatch::new(windows.iter().map(|w| w.duration).collect(), windows.iter().map(|w| w.event).collect())
        .map_err(|e| e.to_string())?;
    let fixed: Vec<bool> = m.names.iter().map(|n| shift_only(n, m.config.n_layers)).collect();
    let free: Vec<Tensor> = m.params.iter().zip(&fixed).filter(|(_, &f)| !f).map(|(t, _)| t.clone()).collect();
    let report = gradcheck_fourth_order(
        |g, ids| {
            let mut it = ids.iter();
            let nodes: Vec<_> = m
                .params
                .iter()
                .zip(&fixed)
                .map(|(t, &f)| if f { g.constant(t.clone()) } else { *it.next().unwrap() })
                .collect();
            let fwd = m
                .forward_with(g, &nodes, &batch, &mut Xoshiro256::new(0))
                .map_err(|e| AutodiffError::InvalidArgument(e.to_string()))?;
            cox_nll(g, fwd.risks, &rs).map_err(|e| AutodiffError::InvalidArgument(e.to_string()))
        },
        &free,
        &[1e-3, 1e-4, 1e-5],
    )
    .map_err(|e| e.to_string())?;
    let mut g = Graph::new();
    let fwd = m.forward(&mut g, &batch, &mut Xoshiro256::new(0)).map_err(|e| e.to_string())?;
    let loss = cox_nll(&mut g, fwd.risks, &rs).map_err(|e| e.to_string())?;
    let grads = g.backward(loss).map_err(|e| e.to_string())?.param_grads(&m.params);
    for (i, _) in fixed.iter().enumerate().filter(|(_, &f)| f) {
        let worst = grads[i].iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if worst >= 1e-12 {
            return Err(format!("{} should have zero gradient, got {worst:e}", m.names[i]));
        }
    }
    Ok(report.max_rel_error)
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut parts = Vec::new();
    let mut worst = 0.0f64;
    for kind in ModelKind::ALL {
        let mut k_worst = 0.0f64;
        for seed in 1..=2 {
            k_worst = k_worst.max(gradcheck_kind(kind, seed)?);
        }
        parts.push(format!("{} {k_worst:.1e}", kind.name()));
        worst = worst.max(k_worst);
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        worst < GRAD_REL_TOL && secs < GRAD_BUDGET_S,
        format!("max rel err {worst:.2e} (< {GRAD_REL_TOL:e}) [{}], {secs:.1} s (< {GRAD_BUDGET_S} s)", parts.join(", ")),
    )
}

// ---------------------------------------------------------------------
// 2. Oracle equivalence

/// Partial-likelihood NLL straight from the definition.
fn oracle_nll(r: &[f64], t: &[f64], e: &[bool]) -> f64 {
    let mut nll = 0.0;
    for i in 0..r.len() {
        if e[i] {
            let s: f64 = (0..r.len()).filter(|&j| t[j] >= t[i]).map(|j| r[j].exp()).sum();
            nll -= r[i] - s.ln();
        }
    }
    nll
}

fn oracle_c(r: &[f64], t: &[f64], e: &[bool], horizon: f64) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..r.len() {
        if !e[i] || t[i] > horizon {
            continue;
        }
        for j in 0..r.len() {
            if t[i] < t[j] {
                den += 1.0;
                num += if r[i] > r[j] {
                    1.0
                } else if r[i] == r[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Censoring survival `G` just before `t`, by direct product.
fn oracle_g_before(t_all: &[f64], e: &[bool], t: f64) -> f64 {
    let mut times: Vec<f64> = t_all.iter().zip(e).filter(|(_, &x)| !x).map(|(&v, _)| v).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    times
        .iter()
        .filter(|&&u| u < t)
        .map(|&u| {
            let n = t_all.iter().filter(|&&v| v >= u).count() as f64;
            let c = t_all.iter().zip(e).filter(|(&v, &x)| !x && v == u).count() as f64;
            1.0 - c / n
        })
        .product()
}

fn oracle_g_at(t_all: &[f64], e: &[bool], t: f64) -> f64 {
    let mut times: Vec<f64> = t_all.iter().zip(e).filter(|(_, &x)| !x).map(|(&v, _)| v).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    times
        .iter()
        .filter(|&&u| u <= t)
        .map(|&u| {
            let n = t_all.iter().filter(|&&v| v >= u).count() as f64;
            let c = t_all.iter().zip(e).filter(|(&v, &x)| !x && v == u).count() as f64;
            1.0 - c / n
        })
        .product()
}

fn oracle_brier(s: &[f64], t: &[f64], e: &[bool], h: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..s.len() {
        if t[i] <= h && e[i] {
            acc += s[i].powi(2) / oracle_g_before(t, e, t[i]);
        } else if t[i] > h {
            acc += (1.0 - s[i]).powi(2) / oracle_g_at(t, e, h);
        }
    }
    acc / s.len() as f64
}

fn oracle_km(d: &[f64], e: &[bool], t: f64) -> f64 {
    let mut times: Vec<f64> = d.iter().zip(e).filter(|(_, &x)| x).map(|(&v, _)| v).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    times
        .iter()
        .filter(|&&u| u <= t)
        .map(|&u| {
            let n = d.iter().filter(|&&v| v >= u).count() as f64;
            let k = d.iter().zip(e).filter(|(&v, &x)| x && v == u).count() as f64;
            1.0 - k / n
        })
        .product()
}

fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let ties = rng.random::<bool>();
    let r = (0..n)
        .map(|_| if ties { rng.random_range(0..4) as f64 } else { rng.random_range(-3.0..3.0) })
        .collect();
    let t = (0..n)
        .map(|_| if ties { rng.random_range(1..10) as f64 } else { rng.random_range(0.1..10.0) })
        .collect();
    let e = (0..n).map(|_| rng.random::<f64>() < 0.65).collect();
    (r, t, e)
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    let mut loss_err = 0.0f64;
    for _ in 0..500 {
        let n = rng.random_range(1..=64);
        let (r, t, e) = random_instance(&mut rng, n);
        let naive = cox_nll_naive(&r, &t, &e).map_err(|e| e.to_string())?;
        let fast = cox_nll_value(&r, &RiskSetBatch::new(t.clone(), e.clone()).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let mut g = Graph::new();
        let node = g.constant(Tensor::from_vec(vec![n], r.clone()).map_err(|e| e.to_string())?);
        let rs = RiskSetBatch::new(t.clone(), e.clone()).map_err(|e| e.to_string())?;
        let l = cox_nll(&mut g, node, &rs).map_err(|e| e.to_string())?;
        let graph = g.value(l).item().map_err(|e| e.to_string())?;
        let o = oracle_nll(&r, &t, &e);
        let scale = o.abs().max(1.0);
        loss_err = loss_err.max([naive, fast, graph].iter().map(|v| (v - o).abs() / scale).fold(0.0, f64::max));
    }

    let mut c_mismatch = 0usize;
    let mut brier_err = 0.0f64;
    let mut n_brier = 0usize;
    for _ in 0..200 {
        let n = rng.random_range(2..=100);
        let (r, t, e) = random_instance(&mut rng, n);
        let h = rng.random_range(0.5..10.0);
        for (got, want) in [
            (c_index(&r, &t, &e).ok(), oracle_c(&r, &t, &e, f64::INFINITY)),
            (c_index_truncated(&r, &t, &e, h).ok(), oracle_c(&r, &t, &e, h)),
        ] {
            if got != want {
                c_mismatch += 1;
            }
        }
        let s: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let g = censoring_km(&t, &e).map_err(|e| e.to_string())?;
        if let Ok(b) = ipcw_brier(&s, &t, &e, h, &g) {
            brier_err = brier_err.max((b - oracle_brier(&s, &t, &e, h)).abs());
            n_brier += 1;
        }
    }

    let mut km_err = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=80);
        let (_, d, e) = random_instance(&mut rng, n);
        let km = kaplan_meier(&d, &e).map_err(|e| e.to_string())?;
        let mut probes = d.clone();
        probes.extend([0.0, 0.05, 5.5, 100.0]);
        for &t in &probes {
            km_err = km_err.max((km.eval(t) - oracle_km(&d, &e, t)).abs());
        }
    }

    check(
        loss_err <= LOSS_TOL && c_mismatch == 0 && brier_err <= BRIER_TOL && km_err <= KM_TOL && n_brier >= 150,
        format!(
            "cox_nll rel err {loss_err:.1e} (<= {LOSS_TOL:e}, 500 batches); C-index mismatches {c_mismatch} (exact, 400 checks); \
             Brier err {brier_err:.1e} (<= {BRIER_TOL:e}, {n_brier} instances); KM err {km_err:.1e} (<= {KM_TOL:e}, 200 instances)"
        ),
    )
}

// ---------------------------------------------------------------------
// 3. Classical recovery

fn criterion_3() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 2000;
    let data: Vec<IdleEvent> = (0..n)
        .map(|i| {
            let u1: f64 = 1.0 - rng.random::<f64>();
            let u2: f64 = rng.random();
            let x = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            let t = -(1.0 - rng.random::<f64>()).ln() / x.exp();
            let c = rng.random_range(0.0..4.0);
            IdleEvent {
                driver_id: format!("s{i}"),
                seq_index: 1,
                covariates: vec![x],
                duration: t.min(c),
                event: t <= c,
                wall_clock_start: i as i64,
            }
        })
        .collect();
    let censored = data.iter().filter(|e| !e.event).count() as f64 / n as f64;
    let fit = fit_coxph(&data, DEFAULT_MAX_ITER, DEFAULT_TOL).map_err(|e| e.to_string())?;
    let beta = fit.beta[0];
    let secs = t0.elapsed().as_secs_f64();
    check(
        (COX_BETA_RANGE.0..=COX_BETA_RANGE.1).contains(&beta) && secs < COX_BUDGET_S && (0.25..=0.35).contains(&censored),
        format!(
            "beta_hat {beta:.4} in [{}, {}], censoring {:.1}%, {secs:.2} s (< {COX_BUDGET_S} s)",
            COX_BETA_RANGE.0,
            COX_BETA_RANGE.1,
            100.0 * censored
        ),
    )
}

// ---------------------------------------------------------------------
// 4. Causal leak

fn criterion_4() -> Outcome {
    let mut worst = 0.0f64;
    let mut n_cases = 0;
    for seq_len in [2, 5, 20] {
        for seed in 0..50u64 {
            let mut rng = Xoshiro256::new(4000 + seed);
            let windows: Vec<WindowSample> = (0..3)
                .map(|i| {
                    let pad = rng.below(seq_len);
                    random_window(&mut rng, 3, seq_len, pad, &format!("D{i}"))
                })
                .collect();
            let m = RiskModel::new(ModelKind::Fact, toy_config(seq_len, 3), DriverIndex::from_windows(&windows), seed)
                .map_err(|e| e.to_string())?;
            let t = rng.below(seq_len - 1);
            let mut perturbed = windows.clone();
            for w in &mut perturbed {
                for tau in t + 1..seq_len {
                    for v in w.row_mut(tau).iter_mut() {
                        *v += 5.0 * rng.normal();
                    }
                }
            }
            let a = m.encode(&windows.iter().collect::<Vec<_>>()).map_err(|e| e.to_string())?;
            let b = m.encode(&perturbed.iter().collect::<Vec<_>>()).map_err(|e| e.to_string())?;
            let d = m.config.hidden_dim;
            for (la, lb) in a.layer_outputs.iter().zip(&b.layer_outputs) {
                for bi in 0..windows.len() {
                    for pos in 0..=t {
                        let off = (bi * seq_len + pos) * d;
                        for k in 0..d {
                            worst = worst.max((la.data()[off + k] - lb.data()[off + k]).abs());
                        }
                    }
                }
            }
            if a.risks == b.risks {
                return Err(format!("perturbation never reached the target (L={seq_len}, seed {seed})"));
            }
            n_cases += 1;
        }
    }
    check(
        worst < CAUSAL_TOL,
        format!("max change at positions <= t: {worst:.1e} (< {CAUSAL_TOL:e}) over {n_cases} cases"),
    )
}

// ---------------------------------------------------------------------
// 5. Model ordering, 7. frailty recovery, 9. determinism

fn neural_config(kind: ModelKind) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.model.kind = kind;
    c.model.lookback = 20;
    c.training.lr = 0.005;
    c.training.frailty_lr = Some(0.03);
    c.training.max_epochs = 8;
    c.training.patience = 3;
    c.training.seeds = vec![1, 2, 3];
    c
}

fn ordering_configs() -> Vec<(&'static str, TrainConfig)> {
    let mut cox = TrainConfig::default();
    cox.model.kind = ModelKind::Linear;
    cox.training.solver = Solver::Newton;
    cox.training.seeds = vec![1, 2, 3];

    let mut frailty = TrainConfig::default();
    frailty.model.kind = ModelKind::FrailtyLinear;
    frailty.training.lr = 0.01;
    frailty.training.frailty_lr = Some(0.05);
    frailty.training.max_epochs = 10;
    frailty.training.patience = 3;
    frailty.training.seeds = vec![1, 2, 3];

    vec![
        ("coxph", cox),
        ("frailty-coxph", frailty),
        ("transformer-cox", neural_config(ModelKind::Transformer)),
        ("fact", neural_config(ModelKind::Fact)),
    ]
}

/// Per model: the test reports and learned frailty contributions of every
/// seed.
struct OrderingRun {
    reports: BTreeMap<&'static str, Vec<EvalReport>>,
    frailty: BTreeMap<&'static str, Vec<Vec<(String, f64)>>>,
    secs: f64,
}

fn ordering_run(data: &Bench) -> Result<OrderingRun, String> {
    let t0 = Instant::now();
    let mut reports = BTreeMap::new();
    let mut frailty = BTreeMap::new();
    for (name, cfg) in ordering_configs() {
        let runs = run_seeds(&cfg, &data.split).map_err(|e| format!("{name}: {e}"))?;
        frailty.insert(name, runs.iter().filter_map(|(o, _)| o.model.frailty_contribution()).collect());
        reports.insert(name, runs.into_iter().map(|(_, r)| r).collect());
    }
    Ok(OrderingRun {
        reports,
        frailty,
        secs: t0.elapsed().as_secs_f64(),
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_c(run: &OrderingRun, name: &str) -> f64 {
    mean(&run.reports[name].iter().map(|r| r.c_index_integrated).collect::<Vec<_>>())
}

fn criterion_5(run: &OrderingRun) -> Outcome {
    let cox = mean_c(run, "coxph");
    let frailty = mean_c(run, "frailty-coxph");
    let transformer = mean_c(run, "transformer-cox");
    let fact = mean_c(run, "fact");
    check(
        cox < frailty && cox < fact && fact - cox >= FACT_MARGIN && fact >= transformer - TRANSFORMER_SLACK && run.secs < ORDERING_BUDGET_S,
        format!(
            "mean test C over 3 seeds: coxph {cox:.4}, frailty-coxph {frailty:.4}, transformer-cox {transformer:.4}, fact {fact:.4}; \
             fact - coxph {:.4} (>= {FACT_MARGIN}), fact - transformer {:+.4} (>= -{TRANSFORMER_SLACK}); {:.0} s (< {ORDERING_BUDGET_S} s)",
            fact - cox,
            fact - transformer,
            run.secs
        ),
    )
}

/// Spearman correlation with average ranks for ties.
fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let (ma, mb) = (mean(&ra), mean(&rb));
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn criterion_7(data: &Bench, run: &OrderingRun) -> Outcome {
    let mut events: HashMap<&str, usize> = HashMap::new();
    for r in &data.records {
        if r.outcome.is_event() {
            *events.entry(r.driver_id.as_str()).or_default() += 1;
        }
    }
    let mut parts = Vec::new();
    let mut worst = f64::INFINITY;
    for name in ["frailty-coxph", "fact"] {
        let mut rhos = Vec::new();
        let mut n_used = 0;
        for learned in &run.frailty[name] {
            let (x, y): (Vec<f64>, Vec<f64>) = learned
                .iter()
                .filter(|(id, _)| events.get(id.as_str()).copied().unwrap_or(0) >= FRAILTY_MIN_EVENTS)
                .filter_map(|(id, v)| data.truth.frailty.get(id).map(|g| (*v, *g)))
                .unzip();
            n_used = x.len();
            rhos.push(spearman(&x, &y));
        }
        let lo = rhos.iter().copied().fold(f64::INFINITY, f64::min);
        worst = worst.min(lo);
        let shown: Vec<String> = rhos.iter().map(|r| format!("{r:.3}")).collect();
        parts.push(format!("{name} rho per seed [{}] on {n_used} drivers", shown.join(", ")));
    }
    check(
        worst >= FRAILTY_MIN_RHO,
        format!("{}; min {worst:.3} (>= {FRAILTY_MIN_RHO}, drivers with >= {FRAILTY_MIN_EVENTS} log-offs)", parts.join("; ")),
    )
}

fn report_numbers(r: &EvalReport) -> Vec<f64> {
    let mut v = vec![r.c_index_integrated, r.ibs, r.tau, r.n_samples as f64, r.n_pairs_used as f64];
    v.extend(&r.horizons);
    v.extend(&r.c_index_at);
    v.extend(&r.brier_at);
    v
}

fn criterion_9(first: &OrderingRun, second: &OrderingRun) -> Outcome {
    let mut worst = 0.0f64;
    let mut n = 0usize;
    for (name, reps) in &first.reports {
        for (a, b) in reps.iter().zip(&second.reports[name]) {
            for (x, y) in report_numbers(a).iter().zip(report_numbers(b)) {
                let d = if x.is_nan() && y.is_nan() { 0.0 } else { (x - y).abs() };
                worst = worst.max(if d.is_nan() { f64::INFINITY } else { d });
                n += 1;
            }
        }
    }
    let frailty_same = first.frailty == second.frailty;
    check(
        worst <= REPEAT_TOL && frailty_same && n > 0,
        format!("{n} metrics repeated, max diff {worst:.1e} (<= {REPEAT_TOL:e}); frailty contributions identical: {frailty_same}"),
    )
}

// ---------------------------------------------------------------------
// 6. Window ablation

fn criterion_6(data: &Bench) -> Outcome {
    let t0 = Instant::now();
    let mut stats = Vec::new();
    for h in [0, 10] {
        let mut cfg = neural_config(ModelKind::Fact);
        cfg.model.lookback = h;
        let runs = run_seeds(&cfg, &data.split).map_err(|e| format!("h={h}: {e}"))?;
        let c25 = mean(&runs.iter().map(|(_, r)| r.c_index_at[0]).collect::<Vec<_>>());
        let b25 = mean(&runs.iter().map(|(_, r)| r.brier_at[0]).collect::<Vec<_>>());
        let ci = mean(&runs.iter().map(|(_, r)| r.c_index_integrated).collect::<Vec<_>>());
        stats.push((c25, b25, ci));
    }
    let (h0, h10) = (stats[0], stats[1]);
    check(
        h10.0 > h0.0 && h10.1 < h0.1,
        format!(
            "fact seed means: C@25% h=10 {:.4} vs h=0 {:.4}; Brier@25% h=10 {:.4} vs h=0 {:.4}; integrated C {:.4} vs {:.4}; {:.0} s",
            h10.0,
            h0.0,
            h10.1,
            h0.1,
            h10.2,
            h0.2,
            t0.elapsed().as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------
// 8. KM / log-rank sanity

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut draw = |rate: f64, n: usize| -> (Vec<f64>, Vec<bool>) {
        (0..n)
            .map(|_| {
                let t = -(1.0 - rng.random::<f64>()).ln() / rate;
                let c = -(1.0 - rng.random::<f64>()).ln() / 0.5;
                (t.min(c), t <= c)
            })
            .unzip()
    };
    let (d, e) = draw(1.0, 500);
    let same = logrank_test(&d, &e, &d, &e).map_err(|e| e.to_string())?;
    let (da, ea) = draw(1.0, 2000);
    let (db, eb) = draw(2.0, 2000);
    let hr2 = logrank_test(&da, &ea, &db, &eb).map_err(|e| e.to_string())?;
    check(
        same.chi2 < IDENTICAL_CHI2_TOL && hr2.p_value < HR2_P_MAX,
        format!(
            "identical groups chi2 {:.1e} (< {IDENTICAL_CHI2_TOL:e}); hazard ratio 2, n=2000/group: chi2 {:.1}, p {:.1e} (< {HR2_P_MAX})",
            same.chi2, hr2.chi2, hr2.p_value
        ),
    )
}

// ---------------------------------------------------------------------
// 10. Pipeline smoke

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_factsurv"))
        .args(args)
        .env_remove("FACT_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("`{}` failed: {}", args[0], String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn criterion_10() -> Outcome {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let (csv, data, run, ev, att) = (p("data.csv"), p("prep"), p("fit"), p("eval"), p("attention.csv"));
    cli(&["synth", "--out", &csv])?;
    cli(&["prep", "--in", &csv, "--out", &data])?;
    cli(&["fit", "--model", "fact", "--data", &data, "--out", &run])?;
    let ckpt = Path::new(&run).join("model.ckpt");
    cli(&["eval", "--model", ckpt.to_str().unwrap(), "--data", &data, "--out", &ev])?;
    cli(&["attention", "--model", ckpt.to_str().unwrap(), "--data", &data, "--out", &att])?;
    let secs = t0.elapsed().as_secs_f64();

    let text = std::fs::read_to_string(Path::new(&ev).join("report.txt")).map_err(|e| e.to_string())?;
    let report = EvalReport::from_text(&text).map_err(|e| e.to_string())?;
    report.validate().map_err(|e| e.to_string())?;
    let weights: Vec<f64> = std::fs::read_to_string(&att)
        .map_err(|e| e.to_string())?
        .lines()
        .skip(1)
        .filter_map(|l| l.rsplit(',').next()?.parse().ok())
        .collect();
    let att_ok = weights.len() == 21 && (weights.iter().sum::<f64>() - 1.0).abs() < 1e-9;
    check(
        report.quantiles == [0.25, 0.5, 0.75] && report.horizons.len() == 3 && att_ok && secs < SMOKE_BUDGET_S,
        format!(
            "synth, prep, fit fact, eval, attention in {secs:.0} s (< {SMOKE_BUDGET_S} s); report C {:.4}, horizons {:?} at q {:?}; \
             attention over {} positions",
            report.c_index_integrated,
            report.horizons.iter().map(|h| format!("{h:.2}")).collect::<Vec<_>>(),
            report.quantiles,
            weights.len()
        ),
    )
}

// ---------------------------------------------------------------------

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    let names = [
        "",
        "gradient correctness",
        "oracle equivalence",
        "classical recovery",
        "causal leak",
        "model ordering",
        "window ablation",
        "frailty recovery",
        "KM/log-rank sanity",
        "determinism",
        "pipeline smoke",
    ];
    let mut failed = Vec::new();
    let mut report = |n: u32, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed.push(n);
                ("FAIL", d)
            }
        };
        println!("acceptance criterion {n:>2} [{tag}] {}: {detail}", names[n as usize]);
    };

    for (n, f) in [(1, criterion_1 as fn() -> Outcome), (2, criterion_2), (3, criterion_3), (4, criterion_4), (8, criterion_8)] {
        if wanted(n) {
            report(n, f());
        }
    }

    if [5, 6, 7, 9].into_iter().any(&wanted) {
        let data = bench();
        let first = if [5, 7, 9].into_iter().any(&wanted) {
            Some(ordering_run(&data))
        } else {
            None
        };
        if let Some(run) = &first {
            if wanted(5) {
                report(5, run.as_ref().map_err(Clone::clone).and_then(criterion_5));
            }
        }
        if wanted(6) {
            report(6, criterion_6(&data));
        }
        if let Some(run) = &first {
            if wanted(7) {
                report(7, run.as_ref().map_err(Clone::clone).and_then(|r| criterion_7(&data, r)));
            }
            if wanted(9) {
                let outcome = match run {
                    Ok(r) => ordering_run(&data).and_then(|again| criterion_9(r, &again)),
                    Err(e) => Err(e.clone()),
                };
                report(9, outcome);
            }
        }
    }

    if wanted(10) {
        report(10, criterion_10());
    }

    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
