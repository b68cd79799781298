//! Negative log partial likelihood with Breslow ties over a minibatch.
//!
//! The risk set of item `i` holds every item `j` with `T_j >= T_i`. Under a
//! descending sort by duration that is a prefix, so a running
//! log-sum-exp gives every denominator in one pass.

use factsurv_autodiff::{CustomOp, Graph, NodeId, Tensor};

use crate::error::{invalid, Result};

/// Minibatch labels plus the descending duration order.
#[derive(Debug, Clone)]
pub struct RiskSetBatch {
    pub durations: Vec<f64>,
    pub events: Vec<bool>,
    /// Indices sorted by duration, longest first.
    pub order: Vec<usize>,
}

impl RiskSetBatch {
    pub fn new(durations: Vec<f64>, events: Vec<bool>) -> Result<Self> {
        if durations.is_empty() {
            return Err(invalid("empty batch"));
        }
        if durations.len() != events.len() {
            return Err(invalid("durations and events differ in length"));
        }
        let mut order: Vec<usize> = (0..durations.len()).collect();
        order.sort_by(|&a, &b| durations[b].total_cmp(&durations[a]));
        Ok(Self { durations, events, order })
    }

    pub fn len(&self) -> usize {
        self.durations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.durations.is_empty()
    }

    pub fn n_events(&self) -> usize {
        self.events.iter().filter(|&&e| e).count()
    }

    /// Runs of equal durations, in descending order.
    fn groups(&self) -> Vec<&[usize]> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < self.order.len() {
            let t = self.durations[self.order[i]];
            let mut j = i + 1;
            while j < self.order.len() && self.durations[self.order[j]] == t {
                j += 1;
            }
            out.push(&self.order[i..j]);
            i = j;
        }
        out
    }

    /// Loss value and, per tie group, the log-sum-exp of its risk set.
    fn forward(&self, r: &[f64]) -> (f64, Vec<f64>) {
        let groups = self.groups();
        let mut lse = Vec::with_capacity(groups.len());
        let (mut m, mut s) = (f64::NEG_INFINITY, 0.0);
        let mut loss = 0.0;
        for g in &groups {
            for &j in *g {
                // streaming log-sum-exp
                if r[j] > m {
                    s = s * (m - r[j]).exp() + 1.0;
                    m = r[j];
                } else {
                    s += (r[j] - m).exp();
                }
            }
            let l = m + s.ln();
            for &j in *g {
                if self.events[j] {
                    loss -= r[j] - l;
                }
            }
            lse.push(l);
        }
        (loss, lse)
    }

    /// `∂loss/∂r_j = exp(r_j) Σ_{i event, T_i <= T_j} exp(−LSE_i) − δ_j`.
    fn gradient(&self, r: &[f64], lse: &[f64]) -> Vec<f64> {
        let groups = self.groups();
        let mut grad = vec![0.0; r.len()];
        // walk from the shortest duration upwards; each term is formed as
        // exp(r_j − LSE_i) to stay in range
        let mut active: Vec<(f64, f64)> = Vec::new();
        let mut acc_ref = f64::NEG_INFINITY;
        let mut acc = 0.0;
        for (k, g) in groups.iter().enumerate().rev() {
            let d = g.iter().filter(|&&j| self.events[j]).count() as f64;
            if d > 0.0 {
                let term = -lse[k] + d.ln();
                active.push((term, d));
                if term > acc_ref {
                    acc = acc * (acc_ref - term).exp() + 1.0;
                    acc_ref = term;
                } else {
                    acc += (term - acc_ref).exp();
                }
            }
            for &j in *g {
                let w = if acc > 0.0 { (r[j] + acc_ref + acc.ln()).exp() } else { 0.0 };
                grad[j] = w - if self.events[j] { 1.0 } else { 0.0 };
            }
        }
        grad
    }
}

/// Sum-form Cox loss as a graph operator on a `[B]` risk vector.
struct CoxNllOp {
    batch: RiskSetBatch,
}

impl CustomOp for CoxNllOp {
    fn name(&self) -> &'static str {
        "cox_nll"
    }

    fn forward(&self, inputs: &[&Tensor]) -> factsurv_autodiff::Result<Tensor> {
        let (loss, _) = self.batch.forward(inputs[0].data());
        Ok(Tensor::scalar(loss))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>> {
        let r = inputs[0].data();
        let (_, lse) = self.batch.forward(r);
        let g = self.batch.gradient(r, &lse);
        vec![g.into_iter().map(|v| v * grad_out[0]).collect()]
    }
}

/// `−Σ_{δ_i=1} [r_i − log Σ_{T_j ≥ T_i} exp(r_j)]` as a graph node.
pub fn cox_nll(g: &mut Graph, risks: NodeId, batch: &RiskSetBatch) -> Result<NodeId> {
    let shape = g.shape(risks);
    if shape != [batch.len()] {
        return Err(invalid(format!("risk shape {shape:?} does not match batch of {}", batch.len())));
    }
    Ok(g.custom(Box::new(CoxNllOp { batch: batch.clone() }), &[risks])?)
}

/// Value of [`cox_nll`] without a graph.
pub fn cox_nll_value(risks: &[f64], batch: &RiskSetBatch) -> Result<f64> {
    if risks.len() != batch.len() {
        return Err(invalid("risks and batch differ in length"));
    }
    Ok(batch.forward(risks).0)
}

/// Direct double loop over events and their risk sets.
pub fn cox_nll_naive(risks: &[f64], durations: &[f64], events: &[bool]) -> Result<f64> {
    if risks.is_empty() {
        return Err(invalid("empty batch"));
    }
    if risks.len() != durations.len() || risks.len() != events.len() {
        return Err(invalid("risks, durations and events differ in length"));
    }
    let mut loss = 0.0;
    for i in 0..risks.len() {
        if !events[i] {
            continue;
        }
        let set: Vec<f64> = (0..risks.len())
            .filter(|&j| durations[j] >= durations[i])
            .map(|j| risks[j])
            .collect();
        let m = set.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + set.iter().map(|r| (r - m).exp()).sum::<f64>().ln();
        loss -= risks[i] - lse;
    }
    Ok(loss)
}
