use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Steps taken so far, per tensor (skipped updates do not count).
    pub t: Vec<u64>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: vec![0; params.len()],
        }
    }
}

/// One bias-corrected Adam update.
///
/// Tensors whose gradient contains a non-finite value are left untouched;
/// the returned vector flags them.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<Vec<bool>> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(AutodiffError::InvalidArgument(format!(
            "adam: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let mut skipped = vec![false; params.len()];
    for (i, p) in params.iter_mut().enumerate() {
        let g = &grads[i];
        if g.len() != p.numel() || state.m[i].len() != p.numel() {
            return Err(AutodiffError::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            skipped[i] = true;
            continue;
        }
        state.t[i] += 1;
        let t = state.t[i] as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(skipped)
}
