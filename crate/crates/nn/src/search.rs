//! Grid search over architecture sizes, attention profiles and feature
//! ablations.

use factsurv_core::data::features::FeatureGroup;
use factsurv_core::data::window::{Split, WindowSample};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, NnError, Result};
use crate::model::{ModelKind, RiskModel};
use crate::train::{mean_sd, run_seeds, train, windows_for, TrainConfig};

/// Values tried for each architecture size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n_heads: Vec<usize>,
    pub frailty_dim: Vec<usize>,
    pub n_layers: Vec<usize>,
    pub hidden_dim: Vec<usize>,
}

impl GridSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let g: Self = toml::from_str(text).map_err(|e| NnError::Format(e.to_string()))?;
        if g.n_cells() == 0 {
            return Err(invalid("grid has no cells"));
        }
        Ok(g)
    }

    pub fn n_cells(&self) -> usize {
        self.n_heads.len() * self.frailty_dim.len() * self.n_layers.len() * self.hidden_dim.len()
    }

    /// `(m, n, l, d)` in a fixed nested order.
    pub fn cells(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.n_cells());
        for &m in &self.n_heads {
            for &n in &self.frailty_dim {
                for &l in &self.n_layers {
                    for &d in &self.hidden_dim {
                        out.push((m, n, l, d));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCell {
    pub n_heads: usize,
    pub frailty_dim: usize,
    pub n_layers: usize,
    pub hidden_dim: usize,
    /// Best validation C-index, `None` when the run failed.
    pub val_c_index: Option<f64>,
    pub error: Option<String>,
}

/// Trains every cell with the first seed of `base` and ranks them by
/// validation C-index, best first. Ties go to the smaller `d`, then `l`,
/// `m`, `n`; failed cells come last.
pub fn grid_search(grid: &GridSpec, base: &TrainConfig, train_w: &[WindowSample], val_w: &[WindowSample]) -> Result<Vec<GridCell>> {
    if grid.n_cells() == 0 {
        return Err(invalid("grid has no cells"));
    }
    let seed = *base.training.seeds.first().ok_or_else(|| invalid("no seed"))?;
    let mut cells: Vec<GridCell> = grid
        .cells()
        .into_par_iter()
        .map(|(m, n, l, d)| {
            let mut cfg = base.clone();
            cfg.model.n_heads = m;
            cfg.model.frailty_dim = n;
            cfg.model.n_layers = l;
            cfg.model.hidden_dim = d;
            let res = train(&cfg, seed, train_w, val_w);
            if let Err(e) = &res {
                log::warn!("grid cell m={m} n={n} l={l} d={d} failed: {e}");
            }
            GridCell {
                n_heads: m,
                frailty_dim: n,
                n_layers: l,
                hidden_dim: d,
                val_c_index: res.as_ref().ok().map(|o| o.best_val_c_index),
                error: res.err().map(|e| e.to_string()),
            }
        })
        .collect();
    cells.sort_by(|a, b| {
        let score = |c: &GridCell| c.val_c_index.unwrap_or(f64::NEG_INFINITY);
        score(b)
            .total_cmp(&score(a))
            .then(a.hidden_dim.cmp(&b.hidden_dim))
            .then(a.n_layers.cmp(&b.n_layers))
            .then(a.n_heads.cmp(&b.n_heads))
            .then(a.frailty_dim.cmp(&b.frailty_dim))
    });
    Ok(cells)
}

/// Mean attention paid by the target position to each position, averaged
/// over samples and heads of one layer (the last when `layer` is `None`).
/// Padded positions get zero weight and the result sums to one.
pub fn attention_profile(model: &RiskModel, windows: &[WindowSample], layer: Option<usize>) -> Result<Vec<f64>> {
    if !model.kind.is_sequence() {
        return Err(invalid(format!("{} has no attention layers", model.kind.name())));
    }
    if windows.is_empty() {
        return Err(invalid("no windows to profile"));
    }
    let layer = layer.unwrap_or(model.config.n_layers - 1);
    if layer >= model.config.n_layers {
        return Err(invalid(format!("layer {layer} out of range")));
    }
    let l = model.config.seq_len;
    let mut acc = vec![0.0; l];
    for chunk in windows.chunks(512) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        let enc = model.encode(&refs)?;
        for head in &enc.attention[layer] {
            let data = head.data();
            for (b, w) in chunk.iter().enumerate() {
                let row = &data[b * l * l + (l - 1) * l..b * l * l + l * l];
                for (tau, &a) in row.iter().enumerate() {
                    if !w.pad_mask[tau] {
                        acc[tau] += a;
                    }
                }
            }
        }
    }
    let total: f64 = acc.iter().sum();
    Ok(acc.into_iter().map(|a| a / total).collect())
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub name: String,
    pub groups: Vec<FeatureGroup>,
    /// Overrides the base lookback (`Some(0)` drops the history).
    pub lookback: Option<usize>,
}

impl Scenario {
    /// All features, each group dropped in turn, and no history.
    pub fn standard() -> Vec<Scenario> {
        let all = FeatureGroup::ALL.to_vec();
        let mut out = vec![Scenario {
            name: "all".into(),
            groups: all.clone(),
            lookback: None,
        }];
        for g in [
            FeatureGroup::Spatial,
            FeatureGroup::Weather,
            FeatureGroup::Temporal,
            FeatureGroup::Workshift,
        ] {
            out.push(Scenario {
                name: format!("no-{}", g.name()),
                groups: all.iter().copied().filter(|&x| x != g).collect(),
                lookback: None,
            });
        }
        out.push(Scenario {
            name: "no-history".into(),
            groups: all,
            lookback: Some(0),
        });
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub scenario: String,
    /// `(mean, sd)` over seeds with the frailty embedding (FACT).
    pub with_embedding: Option<(f64, f64)>,
    /// `(mean, sd)` over seeds without it (transformer).
    pub without_embedding: Option<(f64, f64)>,
    pub errors: Vec<String>,
}

/// Trains FACT and the plain transformer for every scenario over the
/// seeds of `base`; cells report the test integrated C-index.
pub fn ablation_run(base: &TrainConfig, scenarios: &[Scenario], split: &Split) -> Result<Vec<AblationRow>> {
    let mut jobs = Vec::new();
    for (i, s) in scenarios.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.features.groups = s.groups.clone();
        if let Some(h) = s.lookback {
            cfg.model.lookback = h;
        }
        cfg.validate()?;
        for kind in [ModelKind::Fact, ModelKind::Transformer] {
            let mut c = cfg.clone();
            c.model.kind = kind;
            jobs.push((i, kind, c));
        }
    }
    let results: Vec<(usize, ModelKind, Result<Vec<f64>>)> = jobs
        .into_par_iter()
        .map(|(i, kind, cfg)| {
            let r = run_seeds(&cfg, split).map(|runs| runs.iter().map(|(_, rep)| rep.c_index_integrated).collect());
            (i, kind, r)
        })
        .collect();
    let mut rows: Vec<AblationRow> = scenarios
        .iter()
        .map(|s| AblationRow {
            scenario: s.name.clone(),
            with_embedding: None,
            without_embedding: None,
            errors: Vec::new(),
        })
        .collect();
    for (i, kind, r) in results {
        match r {
            Ok(cs) => {
                let cell = Some(mean_sd(&cs));
                if kind == ModelKind::Fact {
                    rows[i].with_embedding = cell;
                } else {
                    rows[i].without_embedding = cell;
                }
            }
            Err(e) => rows[i].errors.push(format!("{}: {e}", kind.name())),
        }
    }
    Ok(rows)
}

/// Windows for `cfg` from each split, as used by the trainers.
pub fn shaped_split(cfg: &TrainConfig, split: &Split) -> Result<Split> {
    Ok(Split {
        train: windows_for(cfg, &split.train)?,
        val: windows_for(cfg, &split.val)?,
        test: windows_for(cfg, &split.test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_grid_has_144_cells() {
        let g = GridSpec {
            n_heads: vec![2, 4, 6],
            frailty_dim: vec![2, 4, 6, 8],
            n_layers: vec![1, 2, 3],
            hidden_dim: vec![8, 16, 32, 64],
        };
        assert_eq!(g.n_cells(), 144);
        assert_eq!(g.cells().len(), 144);
        assert!(GridSpec::from_toml("n_heads = []\nfrailty_dim = [1]\nn_layers = [1]\nhidden_dim = [8]").is_err());
    }

    #[test]
    fn standard_scenarios() {
        let s = Scenario::standard();
        assert_eq!(s.len(), 6);
        assert_eq!(s[5].lookback, Some(0));
        assert!(s[1..5].iter().all(|x| x.groups.len() == 3));
    }

    #[test]
    fn no_features_is_rejected() {
        let s = Scenario {
            name: "nothing".into(),
            groups: vec![],
            lookback: None,
        };
        let split = Split {
            train: vec![],
            val: vec![],
            test: vec![],
        };
        assert!(matches!(
            ablation_run(&TrainConfig::default(), &[s], &split),
            Err(NnError::InvalidArgument(_))
        ));
    }
}
