//! The risk functions `r(window, driver)`.
//!
//! | kind | input | score |
//! |---|---|---|
//! | linear | target covariates | `βᵀx` |
//! | frailty-linear | target covariates | `βᵀx + γ_driver` |
//! | mlp | target covariates | two relu layers of width `d`, then linear |
//! | transformer | whole window | causal encoder, linear head on the last position |
//! | fact | whole window | as transformer, head on `[z, e_driver]` |
//!
//! Sequence models project each row `[X_t, y_t]` to width `d`, add fixed
//! sinusoidal position codes and run `l` post-norm encoder layers
//! (masked multi-head attention, residual, layer norm, relu feed-forward
//! of width `4d`, residual, layer norm). Attention is causal and never
//! looks at left-padded rows.

use std::collections::HashMap;

use factsurv_autodiff::{Graph, NodeId, Tensor, Xoshiro256, MASK_SENTINEL};
use factsurv_core::data::window::WindowSample;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, NnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Linear,
    FrailtyLinear,
    Mlp,
    Transformer,
    Fact,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Linear,
        ModelKind::FrailtyLinear,
        ModelKind::Mlp,
        ModelKind::Transformer,
        ModelKind::Fact,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Linear => "linear",
            ModelKind::FrailtyLinear => "frailty-linear",
            ModelKind::Mlp => "mlp",
            ModelKind::Transformer => "transformer",
            ModelKind::Fact => "fact",
        }
    }

    pub fn has_frailty(self) -> bool {
        matches!(self, ModelKind::FrailtyLinear | ModelKind::Fact)
    }

    pub fn is_sequence(self) -> bool {
        matches!(self, ModelKind::Transformer | ModelKind::Fact)
    }
}

impl std::str::FromStr for ModelKind {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "linear" => ModelKind::Linear,
            "frailty-linear" => ModelKind::FrailtyLinear,
            "mlp" => ModelKind::Mlp,
            "transformer" => ModelKind::Transformer,
            "fact" => ModelKind::Fact,
            _ => return Err(invalid(format!("unknown model kind `{s}`"))),
        })
    }
}

/// Architecture hyperparameters. Fields a kind does not use are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactConfig {
    /// `m`
    pub n_heads: usize,
    /// `n`
    pub frailty_dim: usize,
    /// `l`
    pub n_layers: usize,
    /// `d`
    pub hidden_dim: usize,
    /// `L = h + 1`, target included.
    pub seq_len: usize,
    /// Covariates per row, `p`.
    pub n_features: usize,
    pub n_drivers: usize,
    pub dropout: f64,
    /// Linear model only: use the flattened window instead of the target
    /// covariates.
    #[serde(default)]
    pub flatten_window: bool,
}

impl FactConfig {
    pub fn input_dim(&self) -> usize {
        self.n_features + 2
    }

    pub fn validate(&self, kind: ModelKind) -> Result<()> {
        if self.n_features == 0 {
            return Err(invalid("at least one covariate is required"));
        }
        if self.seq_len == 0 {
            return Err(invalid("seq_len must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid("dropout must lie in [0, 1)"));
        }
        if kind.has_frailty() && self.n_drivers == 0 {
            return Err(invalid("frailty models need at least one known driver"));
        }
        if (kind == ModelKind::Mlp || kind.is_sequence())
            && self.hidden_dim == 0 {
                return Err(invalid("hidden_dim must be at least 1"));
            }
        if kind.is_sequence() {
            if self.n_heads == 0 || self.n_layers == 0 {
                return Err(invalid("n_heads and n_layers must be at least 1"));
            }
            if !self.hidden_dim.is_multiple_of(self.n_heads) {
                return Err(invalid(format!(
                    "hidden_dim {} is not divisible by n_heads {}",
                    self.hidden_dim, self.n_heads
                )));
            }
        }
        if kind == ModelKind::Fact && self.frailty_dim == 0 {
            return Err(invalid("frailty_dim must be at least 1"));
        }
        Ok(())
    }

    /// Width of the linear model's input.
    fn linear_dim(&self) -> usize {
        if self.flatten_window {
            self.seq_len * self.input_dim() - 2
        } else {
            self.n_features
        }
    }
}

/// Row of each known driver in the frailty table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DriverIndex {
    ids: Vec<String>,
    rows: HashMap<String, usize>,
}

impl DriverIndex {
    pub fn new(mut ids: Vec<String>) -> Self {
        ids.sort();
        ids.dedup();
        let rows = ids.iter().enumerate().map(|(i, d)| (d.clone(), i)).collect();
        Self { ids, rows }
    }

    pub fn from_windows(windows: &[WindowSample]) -> Self {
        Self::new(windows.iter().map(|w| w.driver_id.clone()).collect())
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.rows.get(id).copied()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// `L x L` additive mask: 0 where `τ <= t`, [`MASK_SENTINEL`] above the
/// diagonal.
pub fn causal_mask(seq_len: usize) -> Result<Tensor> {
    if seq_len == 0 {
        return Err(invalid("mask length must be at least 1"));
    }
    let data = (0..seq_len * seq_len)
        .map(|k| if k % seq_len > k / seq_len { MASK_SENTINEL } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(vec![seq_len, seq_len], data)?)
}

/// Fixed sinusoidal codes, `L x d`.
pub fn positional_encoding(seq_len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; seq_len * d];
    for pos in 0..seq_len {
        for i in 0..d {
            let freq = 10000f64.powf(-((i - i % 2) as f64) / d as f64);
            let a = pos as f64 * freq;
            data[pos * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::from_vec(vec![seq_len, d], data).expect("consistent shape")
}

/// Model inputs for one minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, L, p+2]` for sequence models, `[B, k]` otherwise.
    pub x: Tensor,
    /// `[B, L, L]` attention mask for sequence models.
    pub mask: Option<Tensor>,
    pub driver_rows: Vec<usize>,
    /// `false` where the driver is not in the frailty table.
    pub known: Vec<bool>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.known.len()
    }
}

/// Node handles of one forward pass.
pub struct Forward {
    /// `[B]` log-risk scores.
    pub risks: NodeId,
    /// Output of every encoder layer, `[B, L, d]`.
    pub layer_outputs: Vec<NodeId>,
    /// Attention weights per layer and head, `[B, L, L]`.
    pub attention: Vec<Vec<NodeId>>,
}

/// Scores and the cold-start flags of a scoring pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub risks: Vec<f64>,
    pub unknown_driver: Vec<bool>,
}

const LAYER_PARAMS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct RiskModel {
    pub kind: ModelKind,
    pub config: FactConfig,
    pub params: Vec<Tensor>,
    pub names: Vec<String>,
    pub drivers: DriverIndex,
}

fn uniform(rng: &mut Xoshiro256, shape: &[usize], fan_in: usize) -> Tensor {
    let a = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-a, a)).collect())
        .expect("consistent shape")
        .trainable()
}

impl RiskModel {
    /// Initializes weights uniformly in `±1/√fan_in`; layer-norm gains at
    /// one, shifts and frailty tables at zero, linear coefficients at zero.
    pub fn new(kind: ModelKind, mut config: FactConfig, drivers: DriverIndex, seed: u64) -> Result<Self> {
        if kind.has_frailty() {
            config.n_drivers = drivers.len();
        }
        config.validate(kind)?;
        let mut rng = Xoshiro256::new(seed);
        let mut params = Vec::new();
        let mut names = Vec::new();
        let mut push = |name: String, t: Tensor| {
            names.push(name);
            params.push(t.trainable());
        };
        let (p, d) = (config.n_features, config.hidden_dim);
        match kind {
            ModelKind::Linear => push("beta".into(), Tensor::zeros(&[config.linear_dim(), 1])),
            ModelKind::FrailtyLinear => {
                push("beta".into(), Tensor::zeros(&[p, 1]));
                push("frailty".into(), Tensor::zeros(&[config.n_drivers, 1]));
            }
            ModelKind::Mlp => {
                push("w1".into(), uniform(&mut rng, &[p, d], p));
                push("b1".into(), uniform(&mut rng, &[d], p));
                push("w2".into(), uniform(&mut rng, &[d, d], d));
                push("b2".into(), uniform(&mut rng, &[d], d));
                push("w3".into(), uniform(&mut rng, &[d, 1], d));
                push("b3".into(), uniform(&mut rng, &[1], d));
            }
            ModelKind::Transformer | ModelKind::Fact => {
                let inp = config.input_dim();
                push("w_x".into(), uniform(&mut rng, &[inp, d], inp));
                push("b_x".into(), uniform(&mut rng, &[d], inp));
                for l in 0..config.n_layers {
                    for w in ["q", "k", "v", "o"] {
                        push(format!("layer{l}.w_{w}"), uniform(&mut rng, &[d, d], d));
                        push(format!("layer{l}.b_{w}"), uniform(&mut rng, &[d], d));
                    }
                    push(format!("layer{l}.ln1_gamma"), Tensor::full(&[d], 1.0));
                    push(format!("layer{l}.ln1_beta"), Tensor::zeros(&[d]));
                    push(format!("layer{l}.w_ff1"), uniform(&mut rng, &[d, 4 * d], d));
                    push(format!("layer{l}.b_ff1"), uniform(&mut rng, &[4 * d], d));
                    push(format!("layer{l}.w_ff2"), uniform(&mut rng, &[4 * d, d], 4 * d));
                    push(format!("layer{l}.b_ff2"), uniform(&mut rng, &[d], 4 * d));
                    push(format!("layer{l}.ln2_gamma"), Tensor::full(&[d], 1.0));
                    push(format!("layer{l}.ln2_beta"), Tensor::zeros(&[d]));
                }
                let head_in = if kind == ModelKind::Fact { d + config.frailty_dim } else { d };
                push("head.w".into(), uniform(&mut rng, &[head_in, 1], head_in));
                push("head.b".into(), uniform(&mut rng, &[1], head_in));
                if kind == ModelKind::Fact {
                    push("frailty".into(), Tensor::zeros(&[config.n_drivers, config.frailty_dim]));
                }
            }
        }
        Ok(Self {
            kind,
            config,
            params,
            names,
            drivers,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.param_index(name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.param_index(name).map(move |i| &mut self.params[i])
    }

    /// Assembles the inputs of `windows`. Drivers missing from the
    /// frailty table map to a zero embedding.
    pub fn batch(&self, windows: &[&WindowSample]) -> Result<Batch> {
        let b = windows.len();
        if b == 0 {
            return Err(invalid("empty batch"));
        }
        let cfg = &self.config;
        for w in windows {
            if w.n_features != cfg.n_features {
                return Err(NnError::ConfigMismatch(format!(
                    "model expects {} covariates, window has {}",
                    cfg.n_features, w.n_features
                )));
            }
            if (self.kind.is_sequence() || cfg.flatten_window) && w.seq_len() != cfg.seq_len {
                return Err(NnError::ConfigMismatch(format!(
                    "model expects sequence length {}, window has {}",
                    cfg.seq_len,
                    w.seq_len()
                )));
            }
        }
        let (x, mask) = if self.kind.is_sequence() {
            let (l, w) = (cfg.seq_len, cfg.input_dim());
            let mut data = Vec::with_capacity(b * l * w);
            let mut mask = Vec::with_capacity(b * l * l);
            for win in windows {
                data.extend_from_slice(&win.sequence);
                for t in 0..l {
                    for tau in 0..l {
                        mask.push(if tau > t || win.pad_mask[tau] { MASK_SENTINEL } else { 0.0 });
                    }
                }
            }
            (
                Tensor::from_vec(vec![b, l, w], data)?,
                Some(Tensor::from_vec(vec![b, l, l], mask)?),
            )
        } else if self.kind == ModelKind::Linear && cfg.flatten_window {
            let k = cfg.linear_dim();
            let mut data = Vec::with_capacity(b * k);
            for win in windows {
                data.extend_from_slice(&win.sequence[..k]);
            }
            (Tensor::from_vec(vec![b, k], data)?, None)
        } else {
            let mut data = Vec::with_capacity(b * cfg.n_features);
            for win in windows {
                data.extend_from_slice(win.target_covariates());
            }
            (Tensor::from_vec(vec![b, cfg.n_features], data)?, None)
        };
        let mut driver_rows = Vec::with_capacity(b);
        let mut known = Vec::with_capacity(b);
        for w in windows {
            match self.drivers.get(&w.driver_id) {
                Some(r) => {
                    driver_rows.push(r);
                    known.push(true);
                }
                None => {
                    driver_rows.push(0);
                    known.push(false);
                }
            }
        }
        Ok(Batch {
            x,
            mask,
            driver_rows,
            known,
        })
    }

    /// Binds every parameter into `g` and runs [`Self::forward_with`].
    pub fn forward(&self, g: &mut Graph, batch: &Batch, rng: &mut Xoshiro256) -> Result<Forward> {
        let nodes: Vec<NodeId> = self.params.iter().enumerate().map(|(i, t)| g.param(i, t)).collect();
        self.forward_with(g, &nodes, batch, rng)
    }

    /// Forward pass with parameters already bound to `p` (same order as
    /// `self.params`).
    pub fn forward_with(&self, g: &mut Graph, p: &[NodeId], batch: &Batch, rng: &mut Xoshiro256) -> Result<Forward> {
        if p.len() != self.params.len() {
            return Err(invalid("parameter node count does not match the model"));
        }
        let b = batch.size();
        let x = g.constant(batch.x.clone());
        let mut layer_outputs = Vec::new();
        let mut attention = Vec::new();
        let out = match self.kind {
            ModelKind::Linear => g.matmul(x, p[0])?,
            ModelKind::FrailtyLinear => {
                let lin = g.matmul(x, p[0])?;
                let gamma = self.frailty_lookup(g, p[1], batch)?;
                g.add(lin, gamma)?
            }
            ModelKind::Mlp => {
                let h = g.matmul(x, p[0])?;
                let h = g.add(h, p[1])?;
                let h = g.relu(h);
                let h = g.matmul(h, p[2])?;
                let h = g.add(h, p[3])?;
                let h = g.relu(h);
                let o = g.matmul(h, p[4])?;
                g.add(o, p[5])?
            }
            ModelKind::Transformer | ModelKind::Fact => {
                let mut h = self.input_projection(g, p, x)?;
                let mask = batch.mask.as_ref().ok_or_else(|| invalid("sequence batch without mask"))?;
                for l in 0..self.config.n_layers {
                    let (out, att) = self.encoder_layer(g, &p[2 + l * LAYER_PARAMS..], h, mask, rng)?;
                    if !g.value(out).all_finite() {
                        return Err(NnError::Numeric(format!("encoder layer {l}")));
                    }
                    layer_outputs.push(out);
                    attention.push(att);
                    h = out;
                }
                let (l, d) = (self.config.seq_len, self.config.hidden_dim);
                let last = g.slice(h, 1, l - 1, l)?;
                let z = g.reshape(last, vec![b, d])?;
                let hp = 2 + self.config.n_layers * LAYER_PARAMS;
                let feat = if self.kind == ModelKind::Fact {
                    let e = self.frailty_lookup(g, p[hp + 2], batch)?;
                    g.concat(&[z, e])?
                } else {
                    z
                };
                let o = g.matmul(feat, p[hp])?;
                g.add(o, p[hp + 1])?
            }
        };
        let risks = g.reshape(out, vec![b])?;
        if !g.value(risks).all_finite() {
            return Err(NnError::Numeric("risk head".into()));
        }
        Ok(Forward {
            risks,
            layer_outputs,
            attention,
        })
    }

    /// `E = X W_x + b_x + PE`.
    fn input_projection(&self, g: &mut Graph, p: &[NodeId], x: NodeId) -> Result<NodeId> {
        let h = g.matmul(x, p[0])?;
        let h = g.add(h, p[1])?;
        let pe = g.constant(positional_encoding(self.config.seq_len, self.config.hidden_dim));
        Ok(g.add(h, pe)?)
    }

    fn encoder_layer(
        &self,
        g: &mut Graph,
        p: &[NodeId],
        h: NodeId,
        mask: &Tensor,
        rng: &mut Xoshiro256,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let (m, d) = (self.config.n_heads, self.config.hidden_dim);
        let dk = d / m;
        let proj = |g: &mut Graph, w: NodeId, bias: NodeId| -> Result<NodeId> {
            let y = g.matmul(h, w)?;
            Ok(g.add(y, bias)?)
        };
        let q = proj(g, p[0], p[1])?;
        let k = proj(g, p[2], p[3])?;
        let v = proj(g, p[4], p[5])?;
        let mut heads = Vec::with_capacity(m);
        let mut weights = Vec::with_capacity(m);
        for hd in 0..m {
            let (a, b) = (hd * dk, (hd + 1) * dk);
            let qh = g.slice(q, 2, a, b)?;
            let kh = g.slice(k, 2, a, b)?;
            let vh = g.slice(v, 2, a, b)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, 1.0 / (dk as f64).sqrt());
            let att = g.softmax(s, Some(mask))?;
            weights.push(att);
            heads.push(g.matmul(att, vh)?);
        }
        let cat = if m == 1 { heads[0] } else { g.concat(&heads)? };
        let o = g.matmul(cat, p[6])?;
        let o = g.add(o, p[7])?;
        let o = g.dropout(o, self.config.dropout, rng)?;
        let r = g.add(h, o)?;
        let h1 = g.layer_norm(r, p[8], p[9], 1e-5)?;
        let f = g.matmul(h1, p[10])?;
        let f = g.add(f, p[11])?;
        let f = g.relu(f);
        let f = g.matmul(f, p[12])?;
        let f = g.add(f, p[13])?;
        let f = g.dropout(f, self.config.dropout, rng)?;
        let r2 = g.add(h1, f)?;
        let out = g.layer_norm(r2, p[14], p[15], 1e-5)?;
        Ok((out, weights))
    }

    /// Table rows for the batch, zeroed for unknown drivers.
    fn frailty_lookup(&self, g: &mut Graph, table: NodeId, batch: &Batch) -> Result<NodeId> {
        let e = g.embedding(table, &batch.driver_rows)?;
        if batch.known.iter().all(|&k| k) {
            return Ok(e);
        }
        let width = g.shape(e)[1];
        let keep: Vec<f64> = batch
            .known
            .iter()
            .flat_map(|&k| std::iter::repeat_n(if k { 1.0 } else { 0.0 }, width))
            .collect();
        let keep = g.constant(Tensor::from_vec(vec![batch.size(), width], keep)?);
        Ok(g.mul(e, keep)?)
    }

    /// Inference scores in chunks, dropout off.
    pub fn score(&self, windows: &[WindowSample]) -> Result<Scores> {
        let mut risks = Vec::with_capacity(windows.len());
        let mut unknown = Vec::with_capacity(windows.len());
        let mut rng = Xoshiro256::new(0);
        for chunk in windows.chunks(512) {
            let refs: Vec<&WindowSample> = chunk.iter().collect();
            let batch = self.batch(&refs)?;
            let mut g = Graph::new();
            let f = self.forward(&mut g, &batch, &mut rng)?;
            risks.extend_from_slice(g.value(f.risks).data());
            unknown.extend(batch.known.iter().map(|k| !k));
        }
        Ok(Scores {
            risks,
            unknown_driver: unknown,
        })
    }

    /// Score of one window. Unlike [`Self::score`], a driver missing from
    /// the frailty table is an error.
    pub fn risk(&self, window: &WindowSample) -> Result<f64> {
        if self.kind.has_frailty() && self.drivers.get(&window.driver_id).is_none() {
            return Err(NnError::UnknownDriver(window.driver_id.clone()));
        }
        Ok(self.score(std::slice::from_ref(window))?.risks[0])
    }

    /// Projected and position-coded inputs `[B, L, d]`. Sequence models
    /// only.
    pub fn project(&self, windows: &[&WindowSample]) -> Result<Tensor> {
        if !self.kind.is_sequence() {
            return Err(invalid(format!("{} has no input projection", self.kind.name())));
        }
        let batch = self.batch(windows)?;
        let mut g = Graph::new();
        let p: Vec<NodeId> = self.params[..2].iter().enumerate().map(|(i, t)| g.param(i, t)).collect();
        let x = g.constant(batch.x);
        let e = self.input_projection(&mut g, &p, x)?;
        Ok(g.value(e).clone())
    }

    /// Encoder outputs and attention weights (dropout off). Sequence
    /// models only.
    pub fn encode(&self, windows: &[&WindowSample]) -> Result<Encoded> {
        if !self.kind.is_sequence() {
            return Err(invalid(format!("{} has no encoder", self.kind.name())));
        }
        let batch = self.batch(windows)?;
        let mut g = Graph::new();
        let f = self.forward(&mut g, &batch, &mut Xoshiro256::new(0))?;
        Ok(Encoded {
            layer_outputs: f.layer_outputs.iter().map(|&n| g.value(n).clone()).collect(),
            attention: f
                .attention
                .iter()
                .map(|hs| hs.iter().map(|&n| g.value(n).clone()).collect())
                .collect(),
            risks: g.value(f.risks).data().to_vec(),
        })
    }

    /// Per-driver frailty contribution to the log-risk: `γ` for the
    /// frailty-linear model, `w_eᵀ e_driver` for FACT.
    pub fn frailty_contribution(&self) -> Option<Vec<(String, f64)>> {
        let table = self.param("frailty")?;
        let n = table.shape()[1];
        let w: Vec<f64> = match self.kind {
            ModelKind::FrailtyLinear => vec![1.0],
            ModelKind::Fact => {
                let head = self.param("head.w")?.data();
                head[head.len() - n..].to_vec()
            }
            _ => return None,
        };
        Some(
            self.drivers
                .ids()
                .iter()
                .enumerate()
                .map(|(i, id)| {
                    let row = &table.data()[i * n..(i + 1) * n];
                    (id.clone(), row.iter().zip(&w).map(|(a, b)| a * b).sum())
                })
                .collect(),
        )
    }
}

/// Values captured by [`RiskModel::encode`].
#[derive(Debug, Clone)]
pub struct Encoded {
    pub layer_outputs: Vec<Tensor>,
    pub attention: Vec<Vec<Tensor>>,
    pub risks: Vec<f64>,
}

/// Closed-form parameter count of a FACT model.
pub fn fact_param_count(p: usize, d: usize, l: usize, n: usize, n_drivers: usize) -> usize {
    let input = (p + 2) * d + d;
    let attention = 4 * (d * d + d);
    let norms = 2 * d + 2 * d;
    let ff = d * 4 * d + 4 * d + 4 * d * d + d;
    input + l * (attention + norms + ff) + (d + n) + 1 + n_drivers * n
}
