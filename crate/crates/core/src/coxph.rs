//! Cox proportional hazards with Breslow ties.
//!
//! [`fit_coxph`] maximizes the full-data partial likelihood by
//! Newton-Raphson from `β = 0` with step halving. [`breslow_baseline`]
//! and [`survival_curve`] turn any log-risk scores into survival curves.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::step::StepFunction;
use crate::survival::IdleEvent;

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-8;
const MAX_HALVINGS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub beta: Vec<f64>,
    /// Log partial likelihood at `beta`.
    pub log_likelihood: f64,
    pub n_iterations: usize,
    pub converged: bool,
}

impl CoxFit {
    pub fn risk(&self, x: &[f64]) -> f64 {
        self.beta.iter().zip(x).map(|(b, v)| b * v).sum()
    }
}

/// Indices sorted by duration, longest first. Risk sets are prefixes.
fn descending_order(durations: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..durations.len()).collect();
    order.sort_by(|&a, &b| durations[b].total_cmp(&durations[a]));
    order
}

/// Calls `f(group)` for each run of equal durations in `order`.
fn tie_groups(order: &[usize], durations: &[f64], mut f: impl FnMut(&[usize])) {
    let mut i = 0;
    while i < order.len() {
        let t = durations[order[i]];
        let mut j = i + 1;
        while j < order.len() && durations[order[j]] == t {
            j += 1;
        }
        f(&order[i..j]);
        i = j;
    }
}

/// Negative log partial likelihood of fixed log-risk scores over the
/// whole data set (Breslow ties).
pub fn cox_nll_full(risks: &[f64], durations: &[f64], events: &[bool]) -> Result<f64> {
    if risks.is_empty() || risks.len() != durations.len() || risks.len() != events.len() {
        return Err(invalid("risks, durations and events must be nonempty and aligned"));
    }
    let m = risks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let order = descending_order(durations);
    let mut s0 = 0.0;
    let mut nll = 0.0;
    tie_groups(&order, durations, |g| {
        for &j in g {
            s0 += (risks[j] - m).exp();
        }
        let log_s0 = m + s0.ln();
        for &j in g {
            if events[j] {
                nll -= risks[j] - log_s0;
            }
        }
    });
    Ok(nll)
}

struct Derivatives {
    nll: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

/// Value, gradient and Hessian of the negative log partial likelihood of
/// `r = Xβ`.
fn derivatives(x: &[&[f64]], durations: &[f64], events: &[bool], order: &[usize], beta: &[f64]) -> Derivatives {
    let p = beta.len();
    let risks: Vec<f64> = x.iter().map(|r| r.iter().zip(beta).map(|(a, b)| a * b).sum()).collect();
    let m = risks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(p);
    let mut s2 = DMatrix::zeros(p, p);
    let mut out = Derivatives {
        nll: 0.0,
        grad: DVector::zeros(p),
        hess: DMatrix::zeros(p, p),
    };
    tie_groups(order, durations, |g| {
        for &j in g {
            let w = (risks[j] - m).exp();
            s0 += w;
            let xj = DVector::from_column_slice(x[j]);
            s1.axpy(w, &xj, 1.0);
            s2.ger(w, &xj, &xj, 1.0);
        }
        let d = g.iter().filter(|&&j| events[j]).count() as f64;
        if d == 0.0 {
            return;
        }
        let log_s0 = m + s0.ln();
        let mean = &s1 / s0;
        for &j in g.iter().filter(|&&j| events[j]) {
            out.nll -= risks[j] - log_s0;
            for k in 0..p {
                out.grad[k] -= x[j][k] - mean[k];
            }
        }
        out.hess += (&s2 / s0 - &mean * mean.transpose()) * d;
    });
    out
}

fn solve_newton(hess: &DMatrix<f64>, grad: &DVector<f64>) -> DVector<f64> {
    let p = grad.len();
    let scale = 1.0 + hess.diagonal().iter().map(|v| v.abs()).fold(0.0, f64::max);
    let mut ridge = 0.0;
    for _ in 0..8 {
        let h = hess + DMatrix::identity(p, p) * ridge;
        if let Some(ch) = h.cholesky() {
            return ch.solve(grad);
        }
        ridge = if ridge == 0.0 { 1e-10 * scale } else { ridge * 100.0 };
    }
    // fall back to a gradient step
    grad / scale
}

/// Fits `β` on a covariate matrix (one row per observation).
pub fn fit_coxph_matrix(
    x: &[&[f64]],
    durations: &[f64],
    events: &[bool],
    max_iter: usize,
    tol: f64,
) -> Result<CoxFit> {
    let n = x.len();
    if n == 0 || durations.len() != n || events.len() != n {
        return Err(invalid("covariates, durations and events must be nonempty and aligned"));
    }
    let p = x[0].len();
    if p == 0 || x.iter().any(|r| r.len() != p) {
        return Err(invalid("every row needs the same positive number of covariates"));
    }
    if !events.iter().any(|&e| e) {
        return Err(invalid("no uncensored events"));
    }
    if x.iter().any(|r| r.iter().any(|v| !v.is_finite())) || durations.iter().any(|d| !(*d >= 0.0 && d.is_finite())) {
        return Err(invalid("non-finite covariate or invalid duration"));
    }
    let order = descending_order(durations);
    let mut beta = vec![0.0; p];
    let mut cur = derivatives(x, durations, events, &order, &beta);
    let mut iter = 0;
    loop {
        if cur.grad.amax() <= tol {
            return Ok(CoxFit {
                beta,
                log_likelihood: -cur.nll,
                n_iterations: iter,
                converged: true,
            });
        }
        if iter >= max_iter {
            break;
        }
        iter += 1;
        let step = solve_newton(&cur.hess, &cur.grad);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b - scale * s).collect();
            let d = derivatives(x, durations, events, &order, &cand);
            if !d.nll.is_finite() || cand.iter().any(|b| !b.is_finite()) {
                scale *= 0.5;
                continue;
            }
            if d.nll <= cur.nll {
                accepted = Some((cand, d));
                break;
            }
            scale *= 0.5;
        }
        match accepted {
            Some((b, d)) => {
                beta = b;
                cur = d;
            }
            None => {
                let full: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b - s).collect();
                let probe = derivatives(x, durations, events, &order, &full);
                if !probe.nll.is_finite() {
                    return Err(CoreError::Diverged {
                        iteration: iter,
                        last_beta: beta,
                    });
                }
                // no descent possible along the Newton direction: we are
                // at the numerical optimum
                break;
            }
        }
    }
    let converged = cur.grad.amax() <= tol;
    Ok(CoxFit {
        beta,
        log_likelihood: -cur.nll,
        n_iterations: iter,
        converged,
    })
}

/// Fits `β` on the covariates of `events`.
pub fn fit_coxph(events: &[IdleEvent], max_iter: usize, tol: f64) -> Result<CoxFit> {
    let x: Vec<&[f64]> = events.iter().map(|e| e.covariates.as_slice()).collect();
    let d: Vec<f64> = events.iter().map(|e| e.duration).collect();
    let s: Vec<bool> = events.iter().map(|e| e.event).collect();
    fit_coxph_matrix(&x, &d, &s, max_iter, tol)
}

/// Analytic gradient of the negative log partial likelihood at `beta`.
pub fn cox_nll_gradient(x: &[&[f64]], durations: &[f64], events: &[bool], beta: &[f64]) -> (f64, Vec<f64>) {
    let order = descending_order(durations);
    let d = derivatives(x, durations, events, &order, beta);
    (d.nll, d.grad.iter().copied().collect())
}

/// Breslow cumulative baseline hazard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineHazard {
    pub cumulative: StepFunction,
}

/// `H0(t) = Σ_{t_j ≤ t} d_j / Σ_{T_k ≥ t_j} exp(r_k)`.
pub fn breslow_from_arrays(durations: &[f64], events: &[bool], risks: &[f64]) -> Result<BaselineHazard> {
    if durations.is_empty() || durations.len() != events.len() || durations.len() != risks.len() {
        return Err(invalid("durations, events and risks must be nonempty and aligned"));
    }
    if risks.iter().any(|r| !r.is_finite()) {
        return Err(invalid("non-finite risk score"));
    }
    let order = descending_order(durations);
    let mut s0 = 0.0;
    let mut incs: Vec<(f64, f64)> = Vec::new();
    tie_groups(&order, durations, |g| {
        for &j in g {
            s0 += risks[j].exp();
        }
        let d = g.iter().filter(|&&j| events[j]).count();
        if d > 0 {
            incs.push((durations[g[0]], d as f64 / s0));
        }
    });
    incs.reverse();
    let mut cum = 0.0;
    let (mut knots, mut values) = (Vec::with_capacity(incs.len()), Vec::with_capacity(incs.len()));
    for (t, h) in incs {
        cum += h;
        knots.push(t);
        values.push(cum);
    }
    Ok(BaselineHazard {
        cumulative: StepFunction::new(knots, values, 0.0)?,
    })
}

pub fn breslow_baseline(events: &[IdleEvent], risks: &[f64]) -> Result<BaselineHazard> {
    let d: Vec<f64> = events.iter().map(|e| e.duration).collect();
    let s: Vec<bool> = events.iter().map(|e| e.event).collect();
    breslow_from_arrays(&d, &s, risks)
}

impl BaselineHazard {
    /// `S(t | r) = exp(−H0(t) e^r)` at one time.
    pub fn survival_at(&self, t: f64, risk: f64) -> f64 {
        (-self.cumulative.eval(t) * risk.exp()).exp()
    }
}

pub fn survival_curve(baseline: &BaselineHazard, risk: f64) -> Result<StepFunction> {
    if !risk.is_finite() {
        return Err(invalid(format!("risk must be finite, got {risk}")));
    }
    let e = risk.exp();
    Ok(baseline.cumulative.map(|h| (-h * e).exp()))
}
