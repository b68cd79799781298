use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `(param index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub n_checked: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `eps`.
///
/// `f` builds the graph from the bound parameter nodes and returns the
/// scalar output. Relative error per element is
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn gradcheck<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradcheckReport>
where
    F: FnMut(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    check(f, params, &[eps], &[(1.0, 0.5)])
}

/// As [`gradcheck`] with the fourth-order central difference
/// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, tried at every step
/// in `steps`; each element keeps its best agreement.
///
/// A single step cannot serve a whole network: large steps straddle relu
/// kinks, small ones drown tiny gradients in rounding noise. Scanning
/// steps picks the reliable regime per element. A wrong analytic
/// gradient still disagrees at every step.
pub fn gradcheck_fourth_order<F>(f: F, params: &[Tensor], steps: &[f64]) -> Result<GradcheckReport>
where
    F: FnMut(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    check(f, params, steps, &[(1.0, 8.0 / 12.0), (2.0, -1.0 / 12.0)])
}

/// `stencil` holds `(k, c)` pairs; the derivative estimate is
/// `Σ c · (f(x + k·eps) − f(x − k·eps)) / eps`. Differencing each pair
/// first keeps the estimate exactly zero where `f` does not move.
fn check<F>(mut f: F, params: &[Tensor], steps: &[f64], stencil: &[(f64, f64)]) -> Result<GradcheckReport>
where
    F: FnMut(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut eval = |ps: &[Tensor]| -> Result<(f64, Graph, NodeId)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().enumerate().map(|(i, p)| g.param(i, p)).collect();
        let out = f(&mut g, &ids)?;
        let v = g.value(out).item()?;
        if !v.is_finite() {
            return Err(AutodiffError::InvalidArgument(format!(
                "non-finite forward value {v}"
            )));
        }
        Ok((v, g, out))
    };

    if steps.is_empty() || steps.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
        return Err(AutodiffError::InvalidArgument("finite-difference steps must be positive".into()));
    }
    let (_, g, out) = eval(params)?;
    let analytic = g.backward(out)?.param_grads(params);

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        n_checked: 0,
    };
    for pi in 0..work.len() {
        for (ei, &a) in analytic[pi].iter().enumerate() {
            let orig = work[pi].data()[ei];
            let mut err = f64::INFINITY;
            for &eps in steps {
                let mut numeric = 0.0;
                for &(k, c) in stencil {
                    work[pi].data_mut()[ei] = orig + k * eps;
                    let fp = eval(&work)?.0;
                    work[pi].data_mut()[ei] = orig - k * eps;
                    let fm = eval(&work)?.0;
                    numeric += c * (fp - fm);
                }
                numeric /= eps;
                err = err.min((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
            }
            work[pi].data_mut()[ei] = orig;
            report.n_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, ei));
            }
        }
    }
    Ok(report)
}
