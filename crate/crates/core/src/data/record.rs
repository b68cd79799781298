//! The idle-record CSV schema.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::time::{format_timestamp, parse_timestamp};
use crate::error::{CoreError, Result};

/// How an idle interval ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    /// The driver logged off: an observed event.
    Logoff,
    /// A trip was assigned: the interval is censored.
    Trip,
}

impl Outcome {
    pub fn is_event(self) -> bool {
        self == Outcome::Logoff
    }

    fn as_str(self) -> &'static str {
        match self {
            Outcome::Logoff => "logoff",
            Outcome::Trip => "trip",
        }
    }
}

/// One idle event as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub timestamp: i64,
    pub start_longitude: f64,
    pub start_latitude: f64,
    pub distance_downtown: f64,
    pub distance_airport: f64,
    pub shift_earnings: f64,
    pub shift_orders: f64,
    pub shift_trip_distance: f64,
    pub shift_idle_distance: f64,
    pub shift_trip_duration: f64,
    pub shift_idle_duration: f64,
    pub temperature: f64,
    pub precipitation: f64,
    pub snowfall: f64,
    pub snow_depth: f64,
    pub driver_id: String,
    pub idle_duration: f64,
    pub outcome: Outcome,
}

impl RawRecord {
    pub const HEADER: [&'static str; 18] = [
        "timestamp",
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
        "driver_id",
        "idle_duration",
        "outcome",
    ];

    pub const NUMERIC_COLUMNS: [&'static str; 15] = [
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
        "idle_duration",
    ];

    pub fn numeric(&self, column: &str) -> Option<f64> {
        Some(match column {
            "start_longitude" => self.start_longitude,
            "start_latitude" => self.start_latitude,
            "distance_downtown" => self.distance_downtown,
            "distance_airport" => self.distance_airport,
            "shift_earnings" => self.shift_earnings,
            "shift_orders" => self.shift_orders,
            "shift_trip_distance" => self.shift_trip_distance,
            "shift_idle_distance" => self.shift_idle_distance,
            "shift_trip_duration" => self.shift_trip_duration,
            "shift_idle_duration" => self.shift_idle_duration,
            "temperature" => self.temperature,
            "precipitation" => self.precipitation,
            "snowfall" => self.snowfall,
            "snow_depth" => self.snow_depth,
            "idle_duration" => self.idle_duration,
            _ => return None,
        })
    }

    fn set_numeric(&mut self, column: &str, v: f64) {
        match column {
            "start_longitude" => self.start_longitude = v,
            "start_latitude" => self.start_latitude = v,
            "distance_downtown" => self.distance_downtown = v,
            "distance_airport" => self.distance_airport = v,
            "shift_earnings" => self.shift_earnings = v,
            "shift_orders" => self.shift_orders = v,
            "shift_trip_distance" => self.shift_trip_distance = v,
            "shift_idle_distance" => self.shift_idle_distance = v,
            "shift_trip_duration" => self.shift_trip_duration = v,
            "shift_idle_duration" => self.shift_idle_duration = v,
            "temperature" => self.temperature = v,
            "precipitation" => self.precipitation = v,
            "snowfall" => self.snowfall = v,
            "snow_depth" => self.snow_depth = v,
            "idle_duration" => self.idle_duration = v,
            _ => unreachable!("unknown numeric column {column}"),
        }
    }

    fn blank() -> Self {
        Self {
            timestamp: 0,
            start_longitude: 0.0,
            start_latitude: 0.0,
            distance_downtown: 0.0,
            distance_airport: 0.0,
            shift_earnings: 0.0,
            shift_orders: 0.0,
            shift_trip_distance: 0.0,
            shift_idle_distance: 0.0,
            shift_trip_duration: 0.0,
            shift_idle_duration: 0.0,
            temperature: 0.0,
            precipitation: 0.0,
            snowfall: 0.0,
            snow_depth: 0.0,
            driver_id: String::new(),
            idle_duration: 0.0,
            outcome: Outcome::Trip,
        }
    }
}

/// Reads and validates records. Output is grouped by driver (sorted by
/// id) and ordered by timestamp within each driver; the file itself must
/// list each driver's records in nondecreasing time.
pub fn ingest_csv(path: &Path) -> Result<Vec<RawRecord>> {
    let file = std::fs::File::open(path)?;
    read_csv(file)
}

pub fn read_csv<R: Read>(reader: R) -> Result<Vec<RawRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CoreError::Format(e.to_string()))?
        .clone();
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let mut cols = Vec::with_capacity(RawRecord::HEADER.len());
    for name in RawRecord::HEADER {
        let i = *index
            .get(name)
            .ok_or_else(|| CoreError::Schema(name.to_string()))?;
        cols.push((name, i));
    }

    let mut out = Vec::new();
    let mut last_seen: HashMap<String, i64> = HashMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| CoreError::Format(e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        let row_err = |message: String| CoreError::Row { line, message };
        let mut rec = RawRecord::blank();
        for &(name, i) in &cols {
            let cell = row.get(i).unwrap_or("");
            match name {
                "timestamp" => {
                    rec.timestamp = parse_timestamp(cell).map_err(|e| row_err(format!("timestamp: {e}")))?
                }
                "driver_id" => {
                    if cell.is_empty() {
                        return Err(row_err("empty driver_id".into()));
                    }
                    rec.driver_id = cell.to_string();
                }
                "outcome" => {
                    rec.outcome = match cell.to_ascii_lowercase().as_str() {
                        "logoff" => Outcome::Logoff,
                        "trip" => Outcome::Trip,
                        other => return Err(row_err(format!("outcome: expected logoff|trip, got `{other}`"))),
                    }
                }
                col => {
                    let v: f64 = cell
                        .parse()
                        .map_err(|_| row_err(format!("{col}: cannot parse `{cell}` as a number")))?;
                    if !v.is_finite() {
                        return Err(row_err(format!("{col}: non-finite value")));
                    }
                    rec.set_numeric(col, v);
                }
            }
        }
        if rec.idle_duration < 0.0 {
            return Err(row_err(format!("idle_duration {} is negative", rec.idle_duration)));
        }
        if let Some(&prev) = last_seen.get(&rec.driver_id) {
            if rec.timestamp < prev {
                return Err(CoreError::Ordering(format!(
                    "line {line}: driver {} timestamp goes backwards",
                    rec.driver_id
                )));
            }
        }
        last_seen.insert(rec.driver_id.clone(), rec.timestamp);
        out.push(rec);
    }
    // stable: keeps file order for equal timestamps
    out.sort_by(|a, b| a.driver_id.cmp(&b.driver_id).then(a.timestamp.cmp(&b.timestamp)));
    Ok(out)
}

pub fn write_csv<W: Write>(writer: W, records: &[RawRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| CoreError::Format(e.to_string());
    w.write_record(RawRecord::HEADER).map_err(err)?;
    for r in records {
        let mut row: Vec<String> = Vec::with_capacity(RawRecord::HEADER.len());
        for name in RawRecord::HEADER {
            row.push(match name {
                "timestamp" => format_timestamp(r.timestamp),
                "driver_id" => r.driver_id.clone(),
                "outcome" => r.outcome.as_str().to_string(),
                col => format!("{}", r.numeric(col).expect("numeric column")),
            });
        }
        w.write_record(&row).map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file(path: &Path, records: &[RawRecord]) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_csv(f, records)
}
