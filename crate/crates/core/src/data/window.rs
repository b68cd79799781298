//! Sliding windows over a driver's history, the chronological split, and
//! the binary window cache.
//!
//! A window of length `L = h + 1` holds the `h` preceding events as
//! `[X_t, T_t, δ_t]` rows followed by the target row `[X_L, 0, 0]`. The
//! target's own outcome appears only in the label.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::survival::IdleEvent;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSample {
    pub driver_id: String,
    /// Sequence index of the target event within its driver.
    pub seq_index: usize,
    pub n_features: usize,
    /// Row-major `L x (n_features + 2)`.
    pub sequence: Vec<f64>,
    /// `true` for left-padded rows.
    pub pad_mask: Vec<bool>,
    /// Target duration in minutes.
    pub duration: f64,
    pub event: bool,
    pub target_wall_clock: i64,
}

impl WindowSample {
    pub fn width(&self) -> usize {
        self.n_features + 2
    }

    pub fn seq_len(&self) -> usize {
        self.pad_mask.len()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let w = self.width();
        &self.sequence[t * w..(t + 1) * w]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        let w = self.width();
        &mut self.sequence[t * w..(t + 1) * w]
    }

    pub fn target_covariates(&self) -> &[f64] {
        let l = self.seq_len();
        &self.row(l - 1)[..self.n_features]
    }

    /// Number of real (unpadded) historical events.
    pub fn history_len(&self) -> usize {
        self.seq_len() - 1 - self.pad_mask.iter().filter(|&&p| p).count()
    }

    /// Keeps only the last `seq_len` rows.
    pub fn truncated(&self, seq_len: usize) -> Result<Self> {
        let l = self.seq_len();
        if seq_len == 0 || seq_len > l {
            return Err(invalid(format!("cannot truncate a length-{l} window to {seq_len}")));
        }
        let w = self.width();
        let skip = l - seq_len;
        Ok(Self {
            sequence: self.sequence[skip * w..].to_vec(),
            pad_mask: self.pad_mask[skip..].to_vec(),
            ..self.clone()
        })
    }

    /// Keeps the listed covariate columns (and the outcome pair).
    pub fn select_features(&self, cols: &[usize]) -> Result<Self> {
        if cols.is_empty() {
            return Err(invalid("no covariate columns selected"));
        }
        if let Some(c) = cols.iter().find(|&&c| c >= self.n_features) {
            return Err(invalid(format!("column {c} out of range for {} features", self.n_features)));
        }
        let p = self.n_features;
        let mut sequence = Vec::with_capacity(self.seq_len() * (cols.len() + 2));
        for t in 0..self.seq_len() {
            let row = self.row(t);
            sequence.extend(cols.iter().map(|&c| row[c]));
            sequence.extend_from_slice(&row[p..]);
        }
        Ok(Self {
            n_features: cols.len(),
            sequence,
            ..self.clone()
        })
    }
}

/// Windows for one driver's time-ordered history.
///
/// Without padding there are `N - L + 1` windows (none if `N < L`). With
/// padding every event is a target and early windows get zero rows on
/// the left, so there are `N` windows.
pub fn build_windows(history: &[IdleEvent], seq_len: usize, pad: bool) -> Result<Vec<WindowSample>> {
    if seq_len == 0 {
        return Err(invalid("sequence length must be at least 1"));
    }
    let Some(first) = history.first() else {
        return Ok(Vec::new());
    };
    let p = first.covariates.len();
    if history.iter().any(|e| e.covariates.len() != p) {
        return Err(invalid("events have differing covariate dimensions"));
    }
    let width = p + 2;
    let first_target = if pad { 0 } else { seq_len - 1 };
    let mut out = Vec::with_capacity(history.len().saturating_sub(first_target));
    for k in first_target..history.len() {
        let target = &history[k];
        let mut sequence = vec![0.0; seq_len * width];
        let mut pad_mask = vec![false; seq_len];
        for t in 0..seq_len {
            // position t holds event k - (seq_len - 1 - t)
            let back = seq_len - 1 - t;
            if back > k {
                pad_mask[t] = true;
                continue;
            }
            let ev = &history[k - back];
            let row = &mut sequence[t * width..(t + 1) * width];
            row[..p].copy_from_slice(&ev.covariates);
            if back > 0 {
                row[p] = ev.duration;
                row[p + 1] = if ev.event { 1.0 } else { 0.0 };
            }
        }
        out.push(WindowSample {
            driver_id: target.driver_id.clone(),
            seq_index: target.seq_index,
            n_features: p,
            sequence,
            pad_mask,
            duration: target.duration,
            event: target.event,
            target_wall_clock: target.wall_clock_start,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

/// Sorts by target time (then driver and sequence index, so the result
/// does not depend on input order) and cuts `floor(f_train M)`,
/// `floor(f_val M)` and the remainder.
pub fn chronological_split(mut windows: Vec<WindowSample>, fractions: [f64; 3]) -> Result<Split> {
    if windows.is_empty() {
        return Err(invalid("cannot split an empty window set"));
    }
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    windows.sort_by(|a, b| {
        a.target_wall_clock
            .cmp(&b.target_wall_clock)
            .then_with(|| a.driver_id.cmp(&b.driver_id))
            .then(a.seq_index.cmp(&b.seq_index))
    });
    let m = windows.len() as f64;
    let n_train = (fractions[0] * m + 1e-9).floor() as usize;
    let n_val = (fractions[1] * m + 1e-9).floor() as usize;
    let test = windows.split_off((n_train + n_val).min(windows.len()));
    let val = windows.split_off(n_train);
    Ok(Split {
        train: windows,
        val,
        test,
    })
}

const MAGIC: &[u8; 8] = b"FSWINDOW";
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub format_version: u32,
    pub n_windows: usize,
    pub seq_len: usize,
    pub n_features: usize,
    pub feature_names: Vec<String>,
}

/// Writes windows as: magic, `u32` version, `u64` header length, JSON
/// header, then per window the driver id, integers and little-endian
/// `f64` payload.
pub fn write_cache<W: Write>(mut w: W, windows: &[WindowSample], feature_names: &[String]) -> Result<()> {
    let (seq_len, n_features) = windows.first().map_or((0, feature_names.len()), |x| (x.seq_len(), x.n_features));
    if windows.iter().any(|x| x.seq_len() != seq_len || x.n_features != n_features) {
        return Err(invalid("windows in one cache must share their shape"));
    }
    let header = CacheHeader {
        format_version: CACHE_VERSION,
        n_windows: windows.len(),
        seq_len,
        n_features,
        feature_names: feature_names.to_vec(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| CoreError::Format(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for x in windows {
        let id = x.driver_id.as_bytes();
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&(x.seq_index as u64).to_le_bytes())?;
        w.write_all(&x.target_wall_clock.to_le_bytes())?;
        w.write_all(&x.duration.to_le_bytes())?;
        w.write_all(&[x.event as u8])?;
        let mask: Vec<u8> = x.pad_mask.iter().map(|&p| p as u8).collect();
        w.write_all(&mask)?;
        for v in &x.sequence {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn read_cache<R: Read>(mut r: R) -> Result<(CacheHeader, Vec<WindowSample>)> {
    let magic: [u8; 8] = read_exact(&mut r)?;
    if &magic != MAGIC {
        return Err(CoreError::Format("not a window cache".into()));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != CACHE_VERSION {
        return Err(CoreError::Format(format!("unsupported window cache version {version}")));
    }
    let hlen = u64::from_le_bytes(read_exact(&mut r)?) as usize;
    let mut json = vec![0u8; hlen];
    r.read_exact(&mut json)?;
    let header: CacheHeader = serde_json::from_slice(&json).map_err(|e| CoreError::Format(e.to_string()))?;
    let (l, p) = (header.seq_len, header.n_features);
    let mut windows = Vec::with_capacity(header.n_windows);
    for _ in 0..header.n_windows {
        let id_len = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)?;
        let driver_id = String::from_utf8(id).map_err(|e| CoreError::Format(e.to_string()))?;
        let seq_index = u64::from_le_bytes(read_exact(&mut r)?) as usize;
        let target_wall_clock = i64::from_le_bytes(read_exact(&mut r)?);
        let duration = f64::from_le_bytes(read_exact(&mut r)?);
        let event = read_exact::<1, _>(&mut r)?[0] != 0;
        let mut mask = vec![0u8; l];
        r.read_exact(&mut mask)?;
        let mut bytes = vec![0u8; l * (p + 2) * 8];
        r.read_exact(&mut bytes)?;
        let sequence = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        windows.push(WindowSample {
            driver_id,
            seq_index,
            n_features: p,
            sequence,
            pad_mask: mask.into_iter().map(|m| m != 0).collect(),
            duration,
            event,
            target_wall_clock,
        });
    }
    Ok((header, windows))
}

pub fn save_cache(path: &Path, windows: &[WindowSample], feature_names: &[String]) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_cache(f, windows, feature_names)
}

pub fn load_cache(path: &Path) -> Result<(CacheHeader, Vec<WindowSample>)> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_cache(f)
}
