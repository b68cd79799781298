//! Calendar helpers over naive local timestamps (seconds since epoch).

use chrono::{DateTime, Datelike, NaiveDateTime, Timelike};

use crate::error::{invalid, Result};

fn naive(ts: i64) -> NaiveDateTime {
    DateTime::from_timestamp(ts, 0)
        .unwrap_or_default()
        .naive_utc()
}

/// Fractional hour in `[0, 24)`.
pub fn hour_of_day(ts: i64) -> f64 {
    ts.rem_euclid(86_400) as f64 / 3600.0
}

/// Monday = 0 … Sunday = 6.
pub fn day_of_week(ts: i64) -> u32 {
    naive(ts).weekday().num_days_from_monday()
}

pub fn month(ts: i64) -> u32 {
    naive(ts).month()
}

pub fn format_timestamp(ts: i64) -> String {
    let n = naive(ts);
    format!(
        "{:04}-{:02}-{:02} {:02}:{:02}:{:02}",
        n.year(),
        n.month(),
        n.day(),
        n.hour(),
        n.minute(),
        n.second()
    )
}

/// Accepts `YYYY-MM-DD HH:MM:SS`, `YYYY-MM-DDTHH:MM:SS` or integer seconds.
pub fn parse_timestamp(s: &str) -> Result<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Ok(v);
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S"] {
        if let Ok(n) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(n.and_utc().timestamp());
        }
    }
    Err(invalid(format!("unparsable timestamp `{s}`")))
}

/// Cyclical encoding `(sin(2πv/P), cos(2πv/P))`.
pub fn cyclical_encode(v: f64, period: f64) -> Result<(f64, f64)> {
    if !(period > 0.0) {
        return Err(invalid(format!("period must be positive, got {period}")));
    }
    let a = std::f64::consts::TAU * v / period;
    Ok((a.sin(), a.cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cyclical_examples() {
        let (s, c) = cyclical_encode(0.0, 24.0).unwrap();
        assert_eq!((s, c), (0.0, 1.0));
        let (s, c) = cyclical_encode(6.0, 24.0).unwrap();
        assert!((s - 1.0).abs() < 1e-15 && c.abs() < 1e-15);
        let (s, c) = cyclical_encode(24.0, 24.0).unwrap();
        assert!(s.abs() < 1e-15 && (c - 1.0).abs() < 1e-15);
        assert!(cyclical_encode(1.0, 0.0).is_err());
        assert!(cyclical_encode(1.0, -3.0).is_err());
    }

    #[test]
    fn calendar() {
        // 2020-01-02 was a Thursday
        let ts = parse_timestamp("2020-01-02 09:30:00").unwrap();
        assert_eq!(day_of_week(ts), 3);
        assert_eq!(month(ts), 1);
        assert!((hour_of_day(ts) - 9.5).abs() < 1e-12);
        assert_eq!(format_timestamp(ts), "2020-01-02 09:30:00");
        assert_eq!(parse_timestamp(&ts.to_string()).unwrap(), ts);
        assert!(parse_timestamp("yesterday").is_err());
    }
}
