//! Recurrent idle events, the product-limit estimator, the two-sample
//! log-rank test and the named stratifications used for descriptive
//! analysis.
//!
//! The log-rank test treats every idle event as an independent
//! observation. Events of one driver are correlated, so the reported
//! p-values are optimistic when applied to recurrent data.

use serde::{Deserialize, Serialize};

use crate::data::record::RawRecord;
use crate::data::time::{day_of_week, hour_of_day};
use crate::error::{invalid, CoreError, Result};
use crate::special::chi2_sf;
use crate::step::StepFunction;

/// One idle interval of one driver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdleEvent {
    pub driver_id: String,
    /// 1-based position of this event within the driver's history.
    pub seq_index: usize,
    pub covariates: Vec<f64>,
    /// Observed idle duration in minutes.
    pub duration: f64,
    /// `true` for a log-off, `false` when a trip censored the interval.
    pub event: bool,
    /// Seconds since the epoch (local wall clock).
    pub wall_clock_start: i64,
}

impl IdleEvent {
    /// Checks the per-driver invariants of a history slice: consecutive
    /// `seq_index` from 1 and nondecreasing start times.
    pub fn validate_history(history: &[IdleEvent]) -> Result<()> {
        for (k, e) in history.iter().enumerate() {
            if !(e.duration >= 0.0 && e.duration.is_finite()) {
                return Err(invalid(format!("duration {} of {}", e.duration, e.driver_id)));
            }
            if e.seq_index != k + 1 {
                return Err(CoreError::Ordering(format!(
                    "driver {} has seq_index {} at position {}",
                    e.driver_id,
                    e.seq_index,
                    k + 1
                )));
            }
            if k > 0 && history[k - 1].wall_clock_start > e.wall_clock_start {
                return Err(CoreError::Ordering(format!(
                    "driver {} event {} starts before its predecessor",
                    e.driver_id, e.seq_index
                )));
            }
            if k > 0 && history[k - 1].driver_id != e.driver_id {
                return Err(invalid("history mixes drivers"));
            }
        }
        Ok(())
    }
}

fn check_survival_input(durations: &[f64], events: &[bool]) -> Result<()> {
    if durations.is_empty() {
        return Err(invalid("empty input"));
    }
    if durations.len() != events.len() {
        return Err(invalid(format!(
            "{} durations but {} event indicators",
            durations.len(),
            events.len()
        )));
    }
    if let Some(d) = durations.iter().find(|d| !(**d >= 0.0 && d.is_finite())) {
        return Err(invalid(format!("duration {d} is negative or not finite")));
    }
    Ok(())
}

/// Kaplan-Meier product-limit estimate of the survival function.
///
/// Knots sit at the distinct event times. A subject censored at an event
/// time is still at risk at that time.
pub fn kaplan_meier(durations: &[f64], events: &[bool]) -> Result<StepFunction> {
    check_survival_input(durations, events)?;
    let mut order: Vec<usize> = (0..durations.len()).collect();
    order.sort_by(|&a, &b| durations[a].total_cmp(&durations[b]));

    let mut at_risk = durations.len();
    let mut surv = 1.0;
    let (mut knots, mut values) = (Vec::new(), Vec::new());
    let mut i = 0;
    while i < order.len() {
        let t = durations[order[i]];
        let mut j = i;
        let mut deaths = 0usize;
        while j < order.len() && durations[order[j]] == t {
            deaths += events[order[j]] as usize;
            j += 1;
        }
        if deaths > 0 {
            surv *= 1.0 - deaths as f64 / at_risk as f64;
            knots.push(t);
            values.push(surv);
        }
        at_risk -= j - i;
        i = j;
    }
    StepFunction::new(knots, values, 1.0)
}

/// Result of a two-sample log-rank test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRank {
    pub chi2: f64,
    pub p_value: f64,
    pub observed_a: f64,
    pub expected_a: f64,
}

/// Two-sample log-rank test over the pooled distinct event times.
pub fn logrank_test(
    durations_a: &[f64],
    events_a: &[bool],
    durations_b: &[f64],
    events_b: &[bool],
) -> Result<LogRank> {
    check_survival_input(durations_a, events_a)?;
    check_survival_input(durations_b, events_b)?;

    // (time, is_group_a, event)
    let mut pooled: Vec<(f64, bool, bool)> = durations_a
        .iter()
        .zip(events_a)
        .map(|(&t, &e)| (t, true, e))
        .chain(durations_b.iter().zip(events_b).map(|(&t, &e)| (t, false, e)))
        .collect();
    if !pooled.iter().any(|p| p.2) {
        return Err(CoreError::DegenerateTest("no events in either group".into()));
    }
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));

    let mut n_a = durations_a.len() as f64;
    let mut n_b = durations_b.len() as f64;
    let (mut obs, mut exp, mut var) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < pooled.len() {
        let t = pooled[i].0;
        let mut j = i;
        let (mut d_a, mut d, mut leave_a, mut leave_b) = (0.0, 0.0, 0.0, 0.0);
        while j < pooled.len() && pooled[j].0 == t {
            let (_, in_a, ev) = pooled[j];
            if ev {
                d += 1.0;
                if in_a {
                    d_a += 1.0;
                }
            }
            if in_a {
                leave_a += 1.0;
            } else {
                leave_b += 1.0;
            }
            j += 1;
        }
        if d > 0.0 {
            let n = n_a + n_b;
            obs += d_a;
            exp += d * n_a / n;
            if n > 1.0 {
                var += d * (n_a / n) * (n_b / n) * (n - d) / (n - 1.0);
            }
        }
        n_a -= leave_a;
        n_b -= leave_b;
        i = j;
    }
    if var <= 0.0 {
        return Err(CoreError::DegenerateTest(
            "zero variance: groups never share a risk set at an event time".into(),
        ));
    }
    let chi2 = (obs - exp).powi(2) / var;
    Ok(LogRank {
        chi2,
        p_value: chi2_sf(chi2, 1.0),
        observed_a: obs,
        expected_a: exp,
    })
}

/// A named partition of idle records.
#[derive(Debug, Clone, PartialEq)]
pub enum StratRule {
    /// Morning 5-11, afternoon 11-17, evening 17-21, night otherwise.
    TimeOfDay,
    /// Sunday versus the rest of the week.
    DayOfWeek,
    /// Cumulative shift earnings: `<= 0`, `(0, 70)`, `>= 70`.
    Fare,
    /// Cumulative shift orders: `< 1`, `[1, 6)`, `>= 6`.
    Requests,
    /// Distance to downtown below / at or above 3 km.
    DistanceDowntown,
    /// Distance to the airport below / at or above 6 km.
    DistanceAirport,
    /// Any numeric column split at a user threshold.
    Threshold { column: String, value: f64 },
}

impl std::str::FromStr for StratRule {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "time_of_day" => Self::TimeOfDay,
            "day_of_week" => Self::DayOfWeek,
            "fare" | "shift_earnings" => Self::Fare,
            "requests" | "shift_orders" => Self::Requests,
            "distance_downtown" => Self::DistanceDowntown,
            "distance_airport" => Self::DistanceAirport,
            other => {
                let Some(rest) = other.strip_prefix("threshold:") else {
                    return Err(invalid(format!("unknown stratification rule `{other}`")));
                };
                let (column, value) = rest
                    .rsplit_once(':')
                    .ok_or_else(|| invalid(format!("expected threshold:<column>:<value>, got `{other}`")))?;
                if RawRecord::NUMERIC_COLUMNS.iter().all(|c| *c != column) {
                    return Err(invalid(format!("unknown covariate `{column}`")));
                }
                let value: f64 = value
                    .parse()
                    .map_err(|_| invalid(format!("bad threshold value `{value}`")))?;
                Self::Threshold {
                    column: column.to_string(),
                    value,
                }
            }
        })
    }
}

/// Groups of record indices, in the rule's canonical label order.
/// Groups that receive no records are kept with an empty index list.
pub type Strata = Vec<(String, Vec<usize>)>;

impl StratRule {
    pub fn labels(&self) -> Vec<String> {
        let v: &[&str] = match self {
            Self::TimeOfDay => &[
                "Morning (5–11am)",
                "Afternoon (11–5pm)",
                "Evening (5–9pm)",
                "Night (9pm–5am)",
            ],
            Self::DayOfWeek => &["Non–Sunday", "Sunday"],
            Self::Fare => &["≤0", "0–70", "≥70"],
            Self::Requests => &["<1", "1–6", "≥6"],
            Self::DistanceDowntown => &["<3 km", "≥3 km"],
            Self::DistanceAirport => &["<6 km", "≥6 km"],
            Self::Threshold { value, .. } => return vec![format!("<{value}"), format!("≥{value}")],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Index into [`Self::labels`] for one record.
    pub fn assign(&self, r: &RawRecord) -> usize {
        match self {
            Self::TimeOfDay => {
                let h = hour_of_day(r.timestamp);
                if (5.0..11.0).contains(&h) {
                    0
                } else if (11.0..17.0).contains(&h) {
                    1
                } else if (17.0..21.0).contains(&h) {
                    2
                } else {
                    3
                }
            }
            Self::DayOfWeek => usize::from(day_of_week(r.timestamp) == 6),
            Self::Fare => {
                if r.shift_earnings <= 0.0 {
                    0
                } else if r.shift_earnings < 70.0 {
                    1
                } else {
                    2
                }
            }
            Self::Requests => {
                if r.shift_orders < 1.0 {
                    0
                } else if r.shift_orders < 6.0 {
                    1
                } else {
                    2
                }
            }
            Self::DistanceDowntown => usize::from(r.distance_downtown >= 3.0),
            Self::DistanceAirport => usize::from(r.distance_airport >= 6.0),
            Self::Threshold { column, value } => {
                let v = r.numeric(column).expect("column validated at parse time");
                usize::from(v >= *value)
            }
        }
    }
}

/// Partitions records under `rule`; every record lands in exactly one group.
pub fn stratify(records: &[RawRecord], rule: &StratRule) -> Strata {
    let mut groups: Strata = rule.labels().into_iter().map(|l| (l, Vec::new())).collect();
    for (i, r) in records.iter().enumerate() {
        groups[rule.assign(r)].1.push(i);
    }
    groups
}
