//! Synthetic ride-hailing drivers with known ground truth.
//!
//! Each driver alternates idle spells and trips inside work shifts. During
//! an idle spell two clocks race: a log-off clock with Weibull baseline
//! hazard scaled by `exp(η)` and an exponential trip-arrival clock. The
//! spell ends at the earlier one; a log-off is an event and ends the
//! shift, a trip censors the spell and the shift continues.
//!
//! The log-risk is
//! `η = Σ β_f (x_f − c_f) / s_f + history_coef · (H − 1) + g_i`,
//! with fixed reference centers `c_f` and scales `s_f`, a driver frailty
//! `g_i ~ N(0, frailty_sd²)` and a history score `H`: an exponentially
//! weighted mean of the driver's previous idle durations in units of ten
//! minutes. `H` is not a column of the output, so only models that look
//! at past outcomes can use it.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, Exp1, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::data::features::{extract, feature_index, FEATURE_NAMES, N_FEATURES};
use crate::data::record::{Outcome, RawRecord};
use crate::error::{invalid, CoreError, Result};

const DOWNTOWN: (f64, f64) = (-79.3832, 43.6532);
const AIRPORT: (f64, f64) = (-79.6248, 43.6777);
const KM_PER_DEG_LAT: f64 = 111.0;
const MAX_SPELLS_PER_SHIFT: usize = 400;

/// Reference `(center, scale)` per encoded feature, used to put the
/// effects in `beta` on a roughly standardized scale.
pub const REFERENCE: [(f64, f64); N_FEATURES] = [
    (0.0, 1.0),
    (0.0, 1.0),
    (0.0, 1.0),
    (0.0, 1.0),
    (2.0, 1.0),
    (-79.38, 0.06),
    (43.65, 0.04),
    (5.0, 4.0),
    (22.0, 5.0),
    (40.0, 40.0),
    (2.0, 2.0),
    (15.0, 15.0),
    (3.0, 3.0),
    (30.0, 30.0),
    (20.0, 20.0),
    (-3.0, 5.0),
    (0.1, 0.5),
    (0.3, 1.0),
    (0.05, 0.05),
];

fn default_beta() -> BTreeMap<String, f64> {
    [
        ("hour_sine", 0.3),
        ("hour_cosine", 0.4),
        ("distance_downtown", 0.25),
        ("shift_earnings", 0.35),
        ("shift_trip_duration", 0.3),
        ("temperature", -0.15),
        ("precipitation", 0.15),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_drivers: usize,
    pub horizon_days: u32,
    /// First simulated day, `YYYY-MM-DD`.
    pub start_date: String,
    /// Probability that a driver works a shift on a given day.
    pub shifts_per_day: f64,
    pub frailty_sd: f64,
    pub weibull_shape: f64,
    /// Weibull scale of the log-off clock, minutes.
    pub weibull_scale: f64,
    /// Trip arrivals per idle minute.
    pub trip_rate: f64,
    pub history_coef: f64,
    /// Weight kept by the history score per new idle spell.
    pub history_decay: f64,
    /// Effect per reference-scaled unit, keyed by feature name. Missing
    /// features have no effect.
    pub beta: BTreeMap<String, f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_drivers: 500,
            horizon_days: 70,
            start_date: "2020-01-02".into(),
            shifts_per_day: 0.3,
            frailty_sd: 0.7,
            weibull_shape: 1.2,
            weibull_scale: 15.0,
            trip_rate: 0.05,
            history_coef: 1.0,
            history_decay: 0.6,
            beta: default_beta(),
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| invalid(format!("synth config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// No covariate effects, no frailty and no history effect: idle
    /// durations are then a Weibull log-off clock racing an exponential
    /// trip clock.
    pub fn null_model(self) -> Self {
        Self {
            frailty_sd: 0.0,
            history_coef: 0.0,
            beta: BTreeMap::new(),
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_drivers == 0 {
            return Err(invalid("n_drivers must be at least 1"));
        }
        if self.horizon_days == 0 {
            return Err(invalid("horizon_days must be at least 1"));
        }
        for (name, v) in [
            ("trip_rate", self.trip_rate),
            ("weibull_shape", self.weibull_shape),
            ("weibull_scale", self.weibull_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.shifts_per_day) {
            return Err(invalid("shifts_per_day must lie in [0, 1]"));
        }
        if !(self.frailty_sd >= 0.0 && self.frailty_sd.is_finite()) {
            return Err(invalid("frailty_sd must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.history_decay) {
            return Err(invalid("history_decay must lie in [0, 1)"));
        }
        if !self.history_coef.is_finite() {
            return Err(invalid("history_coef must be finite"));
        }
        for (k, v) in &self.beta {
            if feature_index(k).is_none() {
                return Err(invalid(format!("beta: unknown feature `{k}`")));
            }
            if !v.is_finite() {
                return Err(invalid(format!("beta.{k} is not finite")));
            }
        }
        self.start()?;
        Ok(())
    }

    fn start(&self) -> Result<i64> {
        let d = NaiveDate::parse_from_str(&self.start_date, "%Y-%m-%d")
            .map_err(|e| invalid(format!("start_date `{}`: {e}", self.start_date)))?;
        Ok(d.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp())
    }

    fn beta_vector(&self) -> Vec<f64> {
        let mut b = vec![0.0; N_FEATURES];
        for (k, v) in &self.beta {
            b[feature_index(k).expect("validated")] = *v;
        }
        b
    }
}

/// Everything needed to check a model against the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    pub feature_names: Vec<String>,
    pub beta: Vec<f64>,
    pub reference_center: Vec<f64>,
    pub reference_scale: Vec<f64>,
    /// Log-risk frailty `g_i` per driver id.
    pub frailty: BTreeMap<String, f64>,
}

impl GroundTruth {
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| CoreError::Format(e.to_string()))?;
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        serde_json::from_str(&s).map_err(|e| CoreError::Format(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Weather {
    temperature: f64,
    precipitation: f64,
    snowfall: f64,
    snow_depth: f64,
}

/// Hourly weather shared by all drivers.
fn weather_table(hours: usize, rng: &mut ChaCha8Rng) -> Vec<Weather> {
    let noise = Normal::new(0.0, 0.8).expect("valid sd");
    let (mut ar, mut wet, mut depth) = (0.0f64, false, 0.02f64);
    let mut out = Vec::with_capacity(hours);
    for j in 0..hours {
        let day = j as f64 / 24.0;
        let hod = (j % 24) as f64;
        ar = 0.95 * ar + rng.sample(noise);
        let temperature = -4.0 + 0.08 * day + 4.0 * (std::f64::consts::TAU * (hod - 9.0) / 24.0).sin() + ar;
        wet = if wet { rng.random::<f64>() < 0.8 } else { rng.random::<f64>() < 0.05 };
        let precipitation = if wet { 0.8 * rng.sample::<f64, _>(Exp1) } else { 0.0 };
        let snowfall = if wet && temperature < 0.0 {
            precipitation * rng.random_range(5.0..12.0)
        } else {
            0.0
        };
        let melt = if temperature > 0.0 { 0.002 * temperature } else { 0.0002 };
        depth = (depth + snowfall / 1000.0 - melt).max(0.0);
        out.push(Weather {
            temperature,
            precipitation,
            snowfall,
            snow_depth: depth,
        });
    }
    out
}

fn distance_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let km_lon = KM_PER_DEG_LAT * (a.1.to_radians()).cos();
    ((a.0 - b.0) * km_lon).hypot((a.1 - b.1) * KM_PER_DEG_LAT)
}

/// A point at `radius` km from downtown in a random direction.
fn point_near_downtown(rng: &mut ChaCha8Rng, mean_radius: f64) -> (f64, f64) {
    let r = (mean_radius * rng.sample::<f64, _>(Exp1)).min(35.0);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let km_lon = KM_PER_DEG_LAT * DOWNTOWN.1.to_radians().cos();
    (DOWNTOWN.0 + r * angle.cos() / km_lon, DOWNTOWN.1 + r * angle.sin() / KM_PER_DEG_LAT)
}

#[derive(Debug, Clone, Copy, Default)]
struct Shift {
    earnings: f64,
    orders: f64,
    trip_distance: f64,
    idle_distance: f64,
    trip_duration: f64,
    idle_duration: f64,
}

struct Simulator<'a> {
    cfg: &'a SynthConfig,
    beta: Vec<f64>,
    start: i64,
    weather: &'a [Weather],
}

impl Simulator<'_> {
    fn weather_at(&self, ts: i64) -> Weather {
        let j = ((ts - self.start).max(0) / 3600) as usize;
        self.weather[j.min(self.weather.len() - 1)]
    }

    fn driver(&self, id: &str, rng: &mut ChaCha8Rng) -> (f64, Vec<RawRecord>) {
        let cfg = self.cfg;
        let g = if cfg.frailty_sd > 0.0 {
            rng.sample(Normal::new(0.0, cfg.frailty_sd).expect("valid sd"))
        } else {
            0.0
        };
        let pref_hour: f64 = rng.random_range(6.0..20.0);
        let home_radius = rng.random_range(2.0..8.0);
        let trip_len = Gamma::new(2.0, 7.5).expect("valid gamma");
        let trip_clock = Exp::new(cfg.trip_rate).expect("validated rate");
        let hour_noise = Normal::new(0.0, 1.5).expect("valid sd");
        let horizon_end = self.start + cfg.horizon_days as i64 * 86_400;

        let mut records = Vec::new();
        let mut history = 1.0f64;
        let mut free_at = self.start;
        for day in 0..cfg.horizon_days as i64 {
            if rng.random::<f64>() >= cfg.shifts_per_day {
                continue;
            }
            let hour = (pref_hour + rng.sample(hour_noise)).clamp(0.0, 23.9);
            let mut t = ((self.start + day * 86_400) as f64 + hour * 3600.0).max(free_at as f64 + 3600.0);
            if t >= horizon_end as f64 {
                break;
            }
            let mut pos = point_near_downtown(rng, home_radius);
            let mut shift = Shift::default();
            for spell in 0..MAX_SPELLS_PER_SHIFT {
                let ts = t.floor() as i64;
                let w = self.weather_at(ts);
                let mut rec = RawRecord {
                    timestamp: ts,
                    start_longitude: pos.0,
                    start_latitude: pos.1,
                    distance_downtown: distance_km(pos, DOWNTOWN),
                    distance_airport: distance_km(pos, AIRPORT),
                    shift_earnings: shift.earnings,
                    shift_orders: shift.orders,
                    shift_trip_distance: shift.trip_distance,
                    shift_idle_distance: shift.idle_distance,
                    shift_trip_duration: shift.trip_duration,
                    shift_idle_duration: shift.idle_duration,
                    temperature: w.temperature,
                    precipitation: w.precipitation,
                    snowfall: w.snowfall,
                    snow_depth: w.snow_depth,
                    driver_id: id.to_string(),
                    idle_duration: 0.0,
                    outcome: Outcome::Trip,
                };
                let x = extract(&rec);
                let mut eta = g + cfg.history_coef * (history - 1.0);
                for (f, &b) in self.beta.iter().enumerate() {
                    if b != 0.0 {
                        eta += b * (x[f] - REFERENCE[f].0) / REFERENCE[f].1;
                    }
                }
                let e: f64 = rng.sample(Exp1);
                let t_off = cfg.weibull_scale * (e * (-eta).exp()).powf(1.0 / cfg.weibull_shape);
                let c: f64 = rng.sample(trip_clock);
                let logoff = t_off <= c || spell + 1 == MAX_SPELLS_PER_SHIFT;
                let dur = t_off.min(c);
                rec.idle_duration = dur;
                rec.outcome = if logoff { Outcome::Logoff } else { Outcome::Trip };
                records.push(rec);

                history = cfg.history_decay * history + (1.0 - cfg.history_decay) * dur / 10.0;
                shift.idle_duration += dur;
                shift.idle_distance += dur * rng.random_range(0.05..0.3);
                t += dur * 60.0;
                if logoff {
                    break;
                }
                let minutes = 3.0 + rng.sample(trip_len);
                let km = minutes * rng.random_range(0.4..0.7);
                shift.earnings += 3.25 + 1.75 * km + 0.3 * minutes;
                shift.orders += 1.0;
                shift.trip_distance += km;
                shift.trip_duration += minutes;
                pos = point_near_downtown(rng, 5.0);
                t += minutes * 60.0;
            }
            free_at = t.ceil() as i64;
        }
        (g, records)
    }
}

/// Simulates all drivers. Records come out grouped by driver id (ids
/// sort in driver order) and time-ordered within each driver.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(Vec<RawRecord>, GroundTruth)> {
    cfg.validate()?;
    let start = cfg.start()?;
    let mut wrng = ChaCha8Rng::seed_from_u64(cfg.seed);
    wrng.set_stream(0);
    let weather = weather_table((cfg.horizon_days as usize + 2) * 24, &mut wrng);
    let sim = Simulator {
        cfg,
        beta: cfg.beta_vector(),
        start,
        weather: &weather,
    };
    let width = cfg.n_drivers.to_string().len().max(4);
    let mut records = Vec::new();
    let mut frailty = BTreeMap::new();
    for i in 0..cfg.n_drivers {
        let id = format!("D{:0width$}", i + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64 + 1);
        let (g, recs) = sim.driver(&id, &mut rng);
        frailty.insert(id, g);
        records.extend(recs);
    }
    let truth = GroundTruth {
        config: cfg.clone(),
        feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        beta: sim.beta.clone(),
        reference_center: REFERENCE.iter().map(|r| r.0).collect(),
        reference_scale: REFERENCE.iter().map(|r| r.1).collect(),
        frailty,
    };
    Ok((records, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_drivers: 20,
            horizon_days: 20,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        let (a, ta) = synth_generate(&small()).unwrap();
        let (b, tb) = synth_generate(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert!(!a.is_empty());
    }

    #[test]
    fn per_driver_order() {
        let (recs, truth) = synth_generate(&small()).unwrap();
        for w in recs.windows(2) {
            assert!(w[0].driver_id < w[1].driver_id || (w[0].driver_id == w[1].driver_id && w[0].timestamp <= w[1].timestamp));
        }
        assert_eq!(truth.frailty.len(), 20);
        assert!(recs.iter().all(|r| r.idle_duration >= 0.0));
    }

    #[test]
    fn invalid_configs() {
        for bad in [
            SynthConfig { trip_rate: 0.0, ..small() },
            SynthConfig { weibull_scale: -1.0, ..small() },
            SynthConfig { n_drivers: 0, ..small() },
            SynthConfig {
                beta: [("mood".to_string(), 1.0)].into_iter().collect(),
                ..small()
            },
        ] {
            assert!(synth_generate(&bad).is_err());
        }
        assert!(SynthConfig::from_toml("n_drivers = 3\nbogus = 1").is_err());
        let c = SynthConfig::from_toml("n_drivers = 3\n[beta]\ntemperature = 0.5").unwrap();
        assert_eq!(c.beta.len(), 1);
    }
}
