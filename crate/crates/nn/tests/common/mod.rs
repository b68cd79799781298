#![allow(dead_code)]

use factsurv_autodiff::Xoshiro256;
use factsurv_core::data::window::WindowSample;
use factsurv_nn::{DriverIndex, FactConfig, ModelKind, RiskModel};

/// Random window with `n_pad` leading padded rows and a zeroed target
/// outcome pair. Durations are rounded to create ties.
pub fn random_window(rng: &mut Xoshiro256, p: usize, seq_len: usize, n_pad: usize, driver: &str) -> WindowSample {
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

pub fn random_batch(seed: u64, b: usize, p: usize, seq_len: usize, n_drivers: usize) -> Vec<WindowSample> {
    let mut rng = Xoshiro256::new(seed);
    let mut out: Vec<WindowSample> = (0..b)
        .map(|i| {
            let pad = rng.below(seq_len);
            random_window(&mut rng, p, seq_len, pad, &format!("D{}", i % n_drivers))
        })
        .collect();
    // At least one event so the loss is defined.
    out[0].event = true;
    out
}

pub fn config(seq_len: usize, p: usize) -> FactConfig {
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

pub fn model(kind: ModelKind, windows: &[WindowSample], cfg: FactConfig, seed: u64) -> RiskModel {
    RiskModel::new(kind, cfg, DriverIndex::from_windows(windows), seed).unwrap()
}

/// Gives zero-initialized parameters (linear coefficients, frailty
/// tables) random values so every gradient path is exercised.
pub fn randomize_zeros(model: &mut RiskModel, seed: u64) {
    let mut rng = Xoshiro256::new(seed);
    for p in &mut model.params {
        if p.data().iter().all(|&v| v == 0.0) {
            for v in p.data_mut() {
                *v = 0.5 * rng.normal();
            }
        }
    }
}
