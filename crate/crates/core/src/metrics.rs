//! Concordance and calibration metrics for right-censored predictions.
//!
//! Harrell's C counts a pair `(i, j)` as usable when `T_i < T_j` and
//! `δ_i = 1`; it is concordant when `r_i > r_j`, and a risk tie counts one
//! half. The Brier score uses inverse-probability-of-censoring weights
//! with the censoring survival `G` evaluated as a left limit at event
//! times.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::coxph::BaselineHazard;
use crate::error::{invalid, CoreError, Result};
use crate::step::StepFunction;
use crate::survival::kaplan_meier;

/// Quantiles of follow-up used for the time-dependent metrics.
pub const DEFAULT_QUANTILES: [f64; 3] = [0.25, 0.5, 0.75];
pub const IBS_GRID_POINTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Concordance {
    pub c_index: f64,
    pub n_pairs: u64,
}

fn check_aligned(risks: &[f64], durations: &[f64], events: &[bool]) -> Result<()> {
    if risks.len() != durations.len() || risks.len() != events.len() {
        return Err(invalid("risks, durations and events must have equal length"));
    }
    if risks.iter().any(|r| r.is_nan()) {
        return Err(invalid("NaN risk score"));
    }
    Ok(())
}

/// Fenwick tree of counts over risk ranks.
struct Fenwick(Vec<u64>);

impl Fenwick {
    fn add(&mut self, i: usize) {
        let mut i = i + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks `< i`.
    fn prefix(&self, i: usize) -> u64 {
        let mut i = i;
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Concordance over usable pairs whose earlier member fails by `horizon`
/// (all pairs when `horizon` is `None`). `O(n log n)`.
pub fn concordance(risks: &[f64], durations: &[f64], events: &[bool], horizon: Option<f64>) -> Result<Concordance> {
    check_aligned(risks, durations, events)?;
    let n = risks.len();
    let mut sorted: Vec<f64> = risks.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let rank = |r: f64| sorted.partition_point(|&v| v < r);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| durations[b].total_cmp(&durations[a]));
    let mut tree = Fenwick(vec![0; sorted.len() + 1]);
    let mut inserted = 0u64;
    // numerator doubled so ties stay integral
    let (mut num2, mut pairs) = (0u64, 0u64);
    let mut i = 0;
    while i < n {
        let t = durations[order[i]];
        let mut j = i;
        while j < n && durations[order[j]] == t {
            j += 1;
        }
        if horizon.is_none_or(|h| t <= h) {
            for &k in &order[i..j] {
                if !events[k] {
                    continue;
                }
                let rk = rank(risks[k]);
                let below = tree.prefix(rk);
                let at_or_below = tree.prefix(rk + 1);
                num2 += 2 * below + (at_or_below - below);
                pairs += inserted;
            }
        }
        for &k in &order[i..j] {
            tree.add(rank(risks[k]));
            inserted += 1;
        }
        i = j;
    }
    if pairs == 0 {
        return Err(CoreError::UndefinedMetric("no usable pairs".into()));
    }
    Ok(Concordance {
        c_index: num2 as f64 / (2 * pairs) as f64,
        n_pairs: pairs,
    })
}

pub fn c_index(risks: &[f64], durations: &[f64], events: &[bool]) -> Result<f64> {
    concordance(risks, durations, events, None).map(|c| c.c_index)
}

pub fn c_index_truncated(risks: &[f64], durations: &[f64], events: &[bool], horizon: f64) -> Result<f64> {
    if !(horizon > 0.0) {
        return Err(invalid(format!("horizon must be positive, got {horizon}")));
    }
    concordance(risks, durations, events, Some(horizon)).map(|c| c.c_index)
}

/// Kaplan-Meier estimate of the censoring survival `G`.
pub fn censoring_km(durations: &[f64], events: &[bool]) -> Result<StepFunction> {
    let flipped: Vec<bool> = events.iter().map(|e| !e).collect();
    kaplan_meier(durations, &flipped)
}

/// IPCW Brier score at `horizon`. `survival_at_t[i]` is the predicted
/// `Ŝ(horizon | x_i)`.
pub fn ipcw_brier(
    survival_at_t: &[f64],
    durations: &[f64],
    events: &[bool],
    horizon: f64,
    censor_km: &StepFunction,
) -> Result<f64> {
    if survival_at_t.is_empty() {
        return Err(invalid("empty input"));
    }
    check_aligned(survival_at_t, durations, events)?;
    let g_t = censor_km.eval(horizon);
    let mut sum = 0.0;
    for ((&s, &t), &e) in survival_at_t.iter().zip(durations).zip(events) {
        if t <= horizon && e {
            let g = censor_km.left_limit(t);
            if g <= 0.0 {
                return Err(CoreError::DegenerateWeights { time: t });
            }
            sum += s * s / g;
        } else if t > horizon {
            if g_t <= 0.0 {
                return Err(CoreError::DegenerateWeights { time: horizon });
            }
            sum += (1.0 - s).powi(2) / g_t;
        }
    }
    Ok(sum / survival_at_t.len() as f64)
}

/// [`ipcw_brier`] for full predicted curves.
pub fn ipcw_brier_curves(
    curves: &[StepFunction],
    durations: &[f64],
    events: &[bool],
    horizon: f64,
    censor_km: &StepFunction,
) -> Result<f64> {
    let s: Vec<f64> = curves.iter().map(|c| c.eval(horizon)).collect();
    ipcw_brier(&s, durations, events, horizon, censor_km)
}

/// `n` equally spaced points on `[start, tau]`.
pub fn brier_grid(start: f64, tau: f64, n: usize) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(invalid(format!("tau must be positive, got {tau}")));
    }
    if n < 2 || !(start < tau) {
        return Err(invalid("grid needs at least two points and start < tau"));
    }
    Ok((0..n).map(|k| start + (tau - start) * k as f64 / (n - 1) as f64).collect())
}

/// Trapezoidal average of a sampled Brier curve over its time span.
pub fn integrated_brier(times: &[f64], values: &[f64]) -> Result<f64> {
    if times.len() < 2 || times.len() != values.len() {
        return Err(invalid("need at least two aligned sample points"));
    }
    let tau = times[times.len() - 1];
    if !(tau > 0.0) {
        return Err(invalid(format!("tau must be positive, got {tau}")));
    }
    if times.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(invalid("sample times must be strictly increasing"));
    }
    let area: f64 = times
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| (t[1] - t[0]) * (v[0] + v[1]) / 2.0)
        .sum();
    Ok(area / (tau - times[0]))
}

/// Type-7 empirical quantiles of all observed durations.
pub fn follow_up_percentiles(durations: &[f64], qs: &[f64]) -> Result<Vec<f64>> {
    if durations.is_empty() {
        return Err(invalid("empty input"));
    }
    if qs.iter().any(|q| !(0.0..=1.0).contains(q)) {
        return Err(invalid("quantiles must lie in [0, 1]"));
    }
    let mut s = durations.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Ok(qs
        .iter()
        .map(|&q| {
            let h = (n - 1) as f64 * q;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            s[lo] + (h - lo as f64) * (s[hi] - s[lo])
        })
        .collect())
}

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Evaluation summary of one model on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub seed: u64,
    pub config_fingerprint: String,
    pub n_samples: usize,
    pub n_pairs_used: u64,
    pub c_index_integrated: f64,
    pub quantiles: Vec<f64>,
    pub horizons: Vec<f64>,
    pub c_index_at: Vec<f64>,
    pub brier_at: Vec<f64>,
    pub ibs: f64,
    pub tau: f64,
}

fn qlabel(q: f64) -> String {
    format!("q{}", (q * 100.0).round() as i64)
}

impl EvalReport {
    /// Flat `key = value` text, one entry per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("format_version = {REPORT_FORMAT_VERSION}\n");
        s += &format!("model = {}\n", self.model);
        s += &format!("seed = {}\n", self.seed);
        s += &format!("config_fingerprint = {}\n", self.config_fingerprint);
        s += &format!("n_samples = {}\n", self.n_samples);
        s += &format!("n_pairs_used = {}\n", self.n_pairs_used);
        s += &format!("c_index_integrated = {}\n", self.c_index_integrated);
        s += &format!("ibs = {}\n", self.ibs);
        s += &format!("tau = {}\n", self.tau);
        for (k, &q) in self.quantiles.iter().enumerate() {
            let l = qlabel(q);
            s += &format!("horizon.{l} = {}\n", self.horizons[k]);
            s += &format!("c_index.{l} = {}\n", self.c_index_at[k]);
            s += &format!("brier.{l} = {}\n", self.brier_at[k]);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| CoreError::Format(format!("eval report: {m}"));
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("malformed line `{line}`")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).cloned().ok_or_else(|| bad(format!("missing `{k}`")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(format!("`{k}` is not a number"))) };
        let version: u32 = get("format_version")?.parse().map_err(|_| bad("bad format_version".into()))?;
        if version != REPORT_FORMAT_VERSION {
            return Err(bad(format!("unsupported format_version {version}")));
        }
        let mut quantiles = Vec::new();
        for k in kv.keys() {
            if let Some(l) = k.strip_prefix("horizon.q") {
                let q: f64 = l.parse().map_err(|_| bad(format!("bad key `{k}`")))?;
                quantiles.push(q / 100.0);
            }
        }
        quantiles.sort_by(f64::total_cmp);
        let mut r = Self {
            model: get("model")?,
            seed: get("seed")?.parse().map_err(|_| bad("bad seed".into()))?,
            config_fingerprint: get("config_fingerprint")?,
            n_samples: num("n_samples")? as usize,
            n_pairs_used: get("n_pairs_used")?.parse().map_err(|_| bad("bad n_pairs_used".into()))?,
            c_index_integrated: num("c_index_integrated")?,
            quantiles: quantiles.clone(),
            horizons: Vec::new(),
            c_index_at: Vec::new(),
            brier_at: Vec::new(),
            ibs: num("ibs")?,
            tau: num("tau")?,
        };
        for q in quantiles {
            let l = qlabel(q);
            r.horizons.push(num(&format!("horizon.{l}"))?);
            r.c_index_at.push(num(&format!("c_index.{l}"))?);
            r.brier_at.push(num(&format!("brier.{l}"))?);
        }
        Ok(r)
    }

    /// Checks the report's own invariants.
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.c_index_integrated) || !self.c_index_at.iter().all(|&v| v.is_nan() || in_unit(v)) {
            return Err(invalid("C-index outside [0, 1]"));
        }
        if !self.brier_at.iter().all(|&v| in_unit(v) || v > 1.0) || !(self.ibs >= 0.0) {
            return Err(invalid("negative Brier score"));
        }
        if self.horizons.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(invalid("horizons must be strictly increasing"));
        }
        if self.horizons.len() != self.quantiles.len()
            || self.c_index_at.len() != self.quantiles.len()
            || self.brier_at.len() != self.quantiles.len()
        {
            return Err(invalid("per-horizon arrays do not match the quantiles"));
        }
        Ok(())
    }
}

/// Everything the report needs besides risks and labels.
#[derive(Debug, Clone)]
pub struct EvalContext<'a> {
    pub model: &'a str,
    pub seed: u64,
    pub config_fingerprint: &'a str,
    pub quantiles: &'a [f64],
}

/// Evaluates log-risk scores with survival curves from a Breslow
/// baseline. Horizons are follow-up percentiles of the evaluated set and
/// the censoring distribution is estimated on the same set. A horizon with
/// no usable pairs gets a NaN C-index.
pub fn evaluate(
    risks: &[f64],
    durations: &[f64],
    events: &[bool],
    baseline: &BaselineHazard,
    ctx: &EvalContext<'_>,
) -> Result<EvalReport> {
    check_aligned(risks, durations, events)?;
    let all = concordance(risks, durations, events, None)?;
    let horizons = follow_up_percentiles(durations, ctx.quantiles)?;
    let g = censoring_km(durations, events)?;
    let surv = |t: f64| -> Vec<f64> { risks.iter().map(|&r| baseline.survival_at(t, r)).collect() };
    let mut c_at = Vec::with_capacity(horizons.len());
    let mut b_at = Vec::with_capacity(horizons.len());
    for &h in &horizons {
        c_at.push(match concordance(risks, durations, events, Some(h)) {
            Ok(c) => c.c_index,
            Err(CoreError::UndefinedMetric(_)) => f64::NAN,
            Err(e) => return Err(e),
        });
        b_at.push(ipcw_brier(&surv(h), durations, events, h, &g)?);
    }
    let tau = follow_up_percentiles(durations, &[0.75])?[0];
    let t_min = durations
        .iter()
        .zip(events)
        .filter(|(_, &e)| e)
        .map(|(&t, _)| t)
        .fold(f64::INFINITY, f64::min);
    let ibs = if t_min < tau {
        let grid = brier_grid(t_min, tau, IBS_GRID_POINTS)?;
        let values = grid
            .iter()
            .map(|&t| ipcw_brier(&surv(t), durations, events, t, &g))
            .collect::<Result<Vec<_>>>()?;
        integrated_brier(&grid, &values)?
    } else {
        f64::NAN
    };
    Ok(EvalReport {
        model: ctx.model.to_string(),
        seed: ctx.seed,
        config_fingerprint: ctx.config_fingerprint.to_string(),
        n_samples: risks.len(),
        n_pairs_used: all.n_pairs,
        c_index_integrated: all.c_index,
        quantiles: ctx.quantiles.to_vec(),
        horizons,
        c_index_at: c_at,
        brier_at: b_at,
        ibs,
        tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_reversed() {
        let t = [1.0, 2.0, 3.0];
        let e = [true; 3];
        assert_eq!(c_index(&[3.0, 2.0, 1.0], &t, &e).unwrap(), 1.0);
        assert_eq!(c_index(&[1.0, 2.0, 3.0], &t, &e).unwrap(), 0.0);
        assert_eq!(c_index(&[1.0, 1.0, 1.0], &t, &e).unwrap(), 0.5);
    }

    #[test]
    fn no_pairs_is_undefined() {
        assert!(matches!(
            c_index(&[1.0, 2.0], &[1.0, 2.0], &[false, false]),
            Err(CoreError::UndefinedMetric(_))
        ));
        assert!(c_index_truncated(&[3.0, 2.0, 1.0], &[1.0, 2.0, 3.0], &[true; 3], 0.5).is_err());
        assert_eq!(
            c_index_truncated(&[3.0, 2.0, 1.0], &[1.0, 2.0, 3.0], &[true; 3], 10.0).unwrap(),
            1.0
        );
    }

    #[test]
    fn brier_examples() {
        let t = [1.0, 2.0, 3.0, 4.0];
        let e = [true; 4];
        let g = censoring_km(&t, &e).unwrap();
        let horizon = 2.5;
        let perfect: Vec<f64> = t.iter().map(|&ti| if ti > horizon { 1.0 } else { 0.0 }).collect();
        assert_eq!(ipcw_brier(&perfect, &t, &e, horizon, &g).unwrap(), 0.0);
        let half = [0.5; 4];
        assert!((ipcw_brier(&half, &t, &e, 10.0, &g).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn integrated_brier_examples() {
        let grid = brier_grid(0.0, 4.0, 100).unwrap();
        let c: Vec<f64> = grid.iter().map(|_| 0.3).collect();
        assert!((integrated_brier(&grid, &c).unwrap() - 0.3).abs() < 1e-14);
        let ramp: Vec<f64> = grid.iter().map(|t| t / 4.0).collect();
        assert!((integrated_brier(&grid, &ramp).unwrap() - 0.5).abs() < 1e-14);
        assert!(brier_grid(0.0, 0.0, 10).is_err());
        assert!(integrated_brier(&[-2.0, -1.0], &[0.1, 0.1]).is_err());
    }

    #[test]
    fn percentiles() {
        let d: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let q = follow_up_percentiles(&d, &DEFAULT_QUANTILES).unwrap();
        assert!((q[0] - 25.75).abs() < 1e-12 && (q[1] - 50.5).abs() < 1e-12 && (q[2] - 75.25).abs() < 1e-12);
        assert_eq!(follow_up_percentiles(&[7.0], &DEFAULT_QUANTILES).unwrap(), vec![7.0; 3]);
        assert_eq!(follow_up_percentiles(&[2.0; 5], &DEFAULT_QUANTILES).unwrap(), vec![2.0; 3]);
    }

    #[test]
    fn report_roundtrip() {
        let r = EvalReport {
            model: "fact".into(),
            seed: 3,
            config_fingerprint: "abc123".into(),
            n_samples: 10,
            n_pairs_used: 42,
            c_index_integrated: 0.6123456789012345,
            quantiles: DEFAULT_QUANTILES.to_vec(),
            horizons: vec![1.5, 4.0, 9.25],
            c_index_at: vec![0.7, 0.65, 0.1 + 0.2],
            brier_at: vec![0.1, 0.2, 0.15],
            ibs: 0.13,
            tau: 9.25,
        };
        let back = EvalReport::from_text(&r.to_text()).unwrap();
        assert_eq!(back, r);
        back.validate().unwrap();
        assert!(EvalReport::from_text("format_version = 9\n").is_err());
    }
}
