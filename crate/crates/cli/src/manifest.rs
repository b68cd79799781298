//! Run manifests: what ran, with which resolved settings and inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorInfo {
    pub category: String,
    pub exit_code: i32,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    /// Full argument vector, program name first.
    pub argv: Vec<String>,
    /// Every setting the command used, defaults filled in.
    pub resolved_config: serde_json::Value,
    /// SHA-256 of each input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub started: String,
    pub finished: Option<String>,
    pub status: String,
    pub outputs: Vec<String>,
    pub error: Option<ErrorInfo>,
}

impl RunManifest {
    pub fn start(command: &str, argv: Vec<String>) -> Self {
        Self {
            format_version: MANIFEST_FORMAT_VERSION,
            command: command.into(),
            argv,
            resolved_config: serde_json::Value::Null,
            inputs: BTreeMap::new(),
            seed: None,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            started: now(),
            finished: None,
            status: "running".into(),
            outputs: Vec::new(),
            error: None,
        }
    }

    /// Hashes `path` and records it as an input. Directories record every
    /// regular file inside them.
    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        if path.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
                .map_err(|e| CliError::io(path, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != MANIFEST_FILE))
                .collect();
            entries.sort();
            for p in entries {
                self.add_input(&p)?;
            }
            return Ok(());
        }
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn finish(&mut self, outcome: std::result::Result<(), &CliError>) {
        self.finished = Some(now());
        match outcome {
            Ok(()) => self.status = "ok".into(),
            Err(e) => {
                self.status = "error".into();
                self.error = Some(ErrorInfo {
                    category: e.category().name().into(),
                    exit_code: e.exit_code(),
                    message: e.to_string(),
                });
            }
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Internal(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

fn now() -> String {
    chrono::Local::now().to_rfc3339()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
