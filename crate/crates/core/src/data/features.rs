//! Feature engineering: the encoded covariate vector of an idle event,
//! its feature groups, and the standardizing [`Scaler`].

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::record::RawRecord;
use crate::data::time::{cyclical_encode, day_of_week, hour_of_day, month};
use crate::data::window::WindowSample;
use crate::error::{invalid, CoreError, Result};
use crate::survival::IdleEvent;

/// Encoded covariates, in column order.
pub const FEATURE_NAMES: [&str; 19] = [
    "hour_sine",
    "hour_cosine",
    "day_sine",
    "day_cosine",
    "month",
    "start_longitude",
    "start_latitude",
    "distance_downtown",
    "distance_airport",
    "shift_earnings",
    "shift_orders",
    "shift_trip_distance",
    "shift_idle_distance",
    "shift_trip_duration",
    "shift_idle_duration",
    "temperature",
    "precipitation",
    "snowfall",
    "snow_depth",
];

pub const N_FEATURES: usize = FEATURE_NAMES.len();

/// Columns already bounded in `[-1, 1]` by the cyclical encoding; the
/// scaler leaves them untouched.
pub const CYCLICAL: [usize; 4] = [0, 1, 2, 3];

pub fn feature_index(name: &str) -> Option<usize> {
    FEATURE_NAMES.iter().position(|f| *f == name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureGroup {
    Temporal,
    Spatial,
    Workshift,
    Weather,
}

impl FeatureGroup {
    pub const ALL: [FeatureGroup; 4] = [
        FeatureGroup::Temporal,
        FeatureGroup::Spatial,
        FeatureGroup::Workshift,
        FeatureGroup::Weather,
    ];

    /// Column range in [`FEATURE_NAMES`].
    pub fn columns(self) -> Range<usize> {
        match self {
            FeatureGroup::Temporal => 0..5,
            FeatureGroup::Spatial => 5..9,
            FeatureGroup::Workshift => 9..15,
            FeatureGroup::Weather => 15..19,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureGroup::Temporal => "temporal",
            FeatureGroup::Spatial => "spatial",
            FeatureGroup::Workshift => "workshift",
            FeatureGroup::Weather => "weather",
        }
    }
}

impl std::str::FromStr for FeatureGroup {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        FeatureGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| invalid(format!("unknown feature group `{s}`")))
    }
}

/// Sorted column indices covered by `groups`.
pub fn group_columns(groups: &[FeatureGroup]) -> Vec<usize> {
    let mut cols: Vec<usize> = groups.iter().flat_map(|g| g.columns()).collect();
    cols.sort_unstable();
    cols.dedup();
    cols
}

/// Encoded (unscaled) feature vector of one record.
pub fn extract(r: &RawRecord) -> Vec<f64> {
    let (hs, hc) = cyclical_encode(hour_of_day(r.timestamp), 24.0).expect("positive period");
    let (ds, dc) = cyclical_encode(day_of_week(r.timestamp) as f64, 7.0).expect("positive period");
    vec![
        hs,
        hc,
        ds,
        dc,
        month(r.timestamp) as f64,
        r.start_longitude,
        r.start_latitude,
        r.distance_downtown,
        r.distance_airport,
        r.shift_earnings,
        r.shift_orders,
        r.shift_trip_distance,
        r.shift_idle_distance,
        r.shift_trip_duration,
        r.shift_idle_duration,
        r.temperature,
        r.precipitation,
        r.snowfall,
        r.snow_depth,
    ]
}

/// Converts records (grouped by driver, time-ordered, as returned by
/// `ingest_csv`) into idle events with encoded covariates and per-driver
/// sequence numbers.
pub fn records_to_events(records: &[RawRecord]) -> Vec<IdleEvent> {
    let mut out = Vec::with_capacity(records.len());
    let mut seq = 0usize;
    for (i, r) in records.iter().enumerate() {
        if i == 0 || records[i - 1].driver_id != r.driver_id {
            seq = 0;
        }
        seq += 1;
        out.push(IdleEvent {
            driver_id: r.driver_id.clone(),
            seq_index: seq,
            covariates: extract(r),
            duration: r.idle_duration,
            event: r.outcome.is_event(),
            wall_clock_start: r.timestamp,
        });
    }
    out
}

/// Splits events into per-driver histories, preserving order.
pub fn histories(events: &[IdleEvent]) -> Vec<&[IdleEvent]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=events.len() {
        if i == events.len() || events[i].driver_id != events[start].driver_id {
            if i > start {
                out.push(&events[start..i]);
            }
            start = i;
        }
    }
    out
}

/// Per-feature standardization fit on training data.
///
/// Cyclical columns are passed through. A constant column keeps its mean
/// subtraction but uses a standard deviation of 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// `false` for columns left untouched.
    pub scaled: Vec<bool>,
    pub duration_mean: f64,
    pub duration_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let n = values.clone().count();
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var.sqrt(), n)
}

impl Scaler {
    /// Fits on covariate rows and observed durations, both from the
    /// training split only. `passthrough` lists column indices to leave
    /// unscaled.
    pub fn fit(rows: &[&[f64]], durations: &[f64], passthrough: &[usize]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(invalid("cannot fit a scaler on an empty training set"));
        };
        if durations.is_empty() {
            return Err(invalid("cannot fit a scaler without durations"));
        }
        let p = first.len();
        if rows.iter().any(|r| r.len() != p) {
            return Err(invalid("ragged covariate rows"));
        }
        let mut mean = vec![0.0; p];
        let mut std = vec![1.0; p];
        let mut scaled = vec![true; p];
        for j in 0..p {
            if passthrough.contains(&j) {
                scaled[j] = false;
                continue;
            }
            let (m, s, _) = mean_std(rows.iter().map(|r| r[j]));
            mean[j] = m;
            std[j] = if s > 0.0 {
                s
            } else {
                let name = FEATURE_NAMES.get(j).copied().unwrap_or("?");
                log::warn!("feature {j} ({name}) is constant on the training split; using std 1");
                1.0
            };
        }
        let (dm, ds, _) = mean_std(durations.iter().copied());
        Ok(Self {
            mean,
            std,
            scaled,
            duration_mean: dm,
            duration_std: if ds > 0.0 { ds } else { 1.0 },
        })
    }

    /// Fits on the target rows and labels of training windows.
    pub fn fit_windows(train: &[WindowSample]) -> Result<Self> {
        let rows: Vec<&[f64]> = train.iter().map(|w| w.target_covariates()).collect();
        let durations: Vec<f64> = train.iter().map(|w| w.duration).collect();
        Self::fit(&rows, &durations, &CYCLICAL)
    }

    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    pub fn transform_row(&self, row: &mut [f64]) {
        for (j, v) in row.iter_mut().enumerate() {
            if self.scaled[j] {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
    }

    pub fn transform_duration(&self, d: f64) -> f64 {
        (d - self.duration_mean) / self.duration_std
    }

    /// Standardizes every non-padded row of every window. Historical
    /// durations are standardized; event indicators, the zeroed target
    /// outcome and the labels are left as they are.
    pub fn apply_windows(&self, windows: &mut [WindowSample]) -> Result<()> {
        for w in windows.iter_mut() {
            if w.n_features != self.n_features() {
                return Err(invalid(format!(
                    "scaler has {} features, window has {}",
                    self.n_features(),
                    w.n_features
                )));
            }
            let l = w.seq_len();
            for t in 0..l {
                if w.pad_mask[t] {
                    continue;
                }
                let p = w.n_features;
                let row = w.row_mut(t);
                self.transform_row(&mut row[..p]);
                if t + 1 < l {
                    row[p] = self.transform_duration(row[p]);
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| CoreError::Format(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        serde_json::from_str(&s).map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_cover_all_columns_once() {
        let cols = group_columns(&FeatureGroup::ALL);
        assert_eq!(cols, (0..N_FEATURES).collect::<Vec<_>>());
        assert_eq!("weather".parse::<FeatureGroup>().unwrap(), FeatureGroup::Weather);
        assert!("mood".parse::<FeatureGroup>().is_err());
    }

    #[test]
    fn scaler_example_and_constant_feature() {
        let rows = [[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]];
        let refs: Vec<&[f64]> = rows.iter().map(|r| &r[..]).collect();
        let s = Scaler::fit(&refs, &[1.0, 2.0], &[]).unwrap();
        let mut r = rows;
        for row in r.iter_mut() {
            s.transform_row(row);
        }
        let z = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((r[0][0] + z).abs() < 1e-12 && r[1][0].abs() < 1e-12 && (r[2][0] - z).abs() < 1e-12);
        assert_eq!([r[0][1], r[1][1], r[2][1]], [0.0, 0.0, 0.0]);
        assert_eq!(s.std[1], 1.0);
    }

    #[test]
    fn passthrough_columns_untouched() {
        let rows = [[0.5, 10.0], [-0.5, 20.0]];
        let refs: Vec<&[f64]> = rows.iter().map(|r| &r[..]).collect();
        let s = Scaler::fit(&refs, &[1.0], &[0]).unwrap();
        let mut row = [0.25, 15.0];
        s.transform_row(&mut row);
        assert_eq!(row, [0.25, 0.0]);
    }

    #[test]
    fn empty_fit_rejected() {
        assert!(Scaler::fit(&[], &[1.0], &[]).is_err());
    }
}
