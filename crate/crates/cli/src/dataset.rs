//! The prepared-data directory written by `prep`.

use std::path::Path;

use factsurv_core::data::features::{Scaler, FEATURE_NAMES};
use factsurv_core::data::window::{load_cache, save_cache, Split, WindowSample};
use serde::{Deserialize, Serialize};

use crate::args::SplitArg;
use crate::error::{CliError, Result};

pub const PREP_FORMAT_VERSION: u32 = 1;
pub const PREP_FILE: &str = "prep.json";
pub const SCALER_FILE: &str = "scaler.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepInfo {
    pub format_version: u32,
    pub lookback: usize,
    pub fractions: [f64; 3],
    pub n_records: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub feature_names: Vec<String>,
}

pub fn cache_file(split: SplitArg) -> String {
    format!("{}.cache", split.name())
}

/// Writes the scaler, the three window caches and `prep.json`.
pub fn save_prepared(dir: &Path, info: &PrepInfo, split: &Split, scaler: &Scaler) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let names: Vec<String> = FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
    let mut written = Vec::new();
    let scaler_path = dir.join(SCALER_FILE);
    scaler.save(&scaler_path)?;
    written.push(scaler_path);
    for (arg, windows) in [(SplitArg::Train, &split.train), (SplitArg::Val, &split.val), (SplitArg::Test, &split.test)] {
        let p = dir.join(cache_file(arg));
        save_cache(&p, windows, &names)?;
        written.push(p);
    }
    let p = dir.join(PREP_FILE);
    let text = serde_json::to_string_pretty(info).map_err(|e| CliError::Internal(e.to_string()))?;
    std::fs::write(&p, text + "\n").map_err(|e| CliError::io(&p, e))?;
    written.push(p);
    Ok(written)
}

pub fn read_info(dir: &Path) -> Result<PrepInfo> {
    let p = dir.join(PREP_FILE);
    let text = std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
    let info: PrepInfo = serde_json::from_str(&text)
        .map_err(|e| CliError::Core(factsurv_core::CoreError::Format(format!("{}: {e}", p.display()))))?;
    if info.format_version != PREP_FORMAT_VERSION {
        return Err(CliError::Core(factsurv_core::CoreError::Format(format!(
            "{}: unsupported format_version {}",
            p.display(),
            info.format_version
        ))));
    }
    Ok(info)
}

pub fn load_split(dir: &Path, split: SplitArg) -> Result<Vec<WindowSample>> {
    let p = dir.join(cache_file(split));
    if !p.is_file() {
        return Err(CliError::io(&p, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    Ok(load_cache(&p)?.1)
}

pub fn load_all(dir: &Path) -> Result<Split> {
    Ok(Split {
        train: load_split(dir, SplitArg::Train)?,
        val: load_split(dir, SplitArg::Val)?,
        test: load_split(dir, SplitArg::Test)?,
    })
}

pub fn load_scaler(dir: &Path) -> Result<Scaler> {
    let p = dir.join(SCALER_FILE);
    if !p.is_file() {
        return Err(CliError::io(&p, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    Ok(Scaler::load(&p)?)
}
