//! Model files: `FACTCKPT`, a little-endian `u32` format version, a `u64`
//! header length, a JSON header, then every parameter as little-endian
//! `f64` in header order. Parameters round-trip bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use factsurv_autodiff::Tensor;
use factsurv_core::coxph::BaselineHazard;
use factsurv_core::data::features::Scaler;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::model::{DriverIndex, FactConfig, ModelKind, RiskModel};

pub const MAGIC: &[u8; 8] = b"FACTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything besides the weights that scoring new data needs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    /// Covariate columns the model was trained on, in the full feature
    /// layout.
    pub feature_columns: Vec<usize>,
    pub scaler: Option<Scaler>,
    /// Breslow baseline fit on the training split.
    pub baseline: Option<BaselineHazard>,
    pub train_config: Option<serde_json::Value>,
    pub epochs_trained: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: ModelKind,
    config: FactConfig,
    param_names: Vec<String>,
    param_shapes: Vec<Vec<usize>>,
    drivers: Vec<String>,
    meta: CheckpointMeta,
}

pub fn write_checkpoint<W: Write>(mut w: W, model: &RiskModel, meta: &CheckpointMeta) -> Result<()> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        kind: model.kind,
        config: model.config.clone(),
        param_names: model.names.clone(),
        param_shapes: model.params.iter().map(|p| p.shape().to_vec()).collect(),
        drivers: model.drivers.ids().to_vec(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| NnError::Format(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for p in &model.params {
        for v in p.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(RiskModel, CheckpointMeta)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Format("not a model checkpoint".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Format(format!(
            "checkpoint format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let h: Header = serde_json::from_slice(&json).map_err(|e| NnError::Format(e.to_string()))?;
    if h.param_names.len() != h.param_shapes.len() {
        return Err(NnError::Format("parameter names and shapes disagree".into()));
    }
    let mut params = Vec::with_capacity(h.param_shapes.len());
    for shape in &h.param_shapes {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        params.push(Tensor::from_vec(shape.clone(), data)?.trainable());
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(NnError::Format(format!("{} trailing bytes", rest.len())));
    }
    let drivers = DriverIndex::new(h.drivers);
    // Rebuild from the header so the layout is checked against the kind.
    let reference = RiskModel::new(h.kind, h.config, drivers, 0)?;
    if reference.names != h.param_names
        || reference.params.iter().zip(&params).any(|(a, b)| a.shape() != b.shape())
    {
        return Err(NnError::Format("parameter layout does not match the model kind".into()));
    }
    Ok((RiskModel { params, ..reference }, h.meta))
}

pub fn save_checkpoint(path: &Path, model: &RiskModel, meta: &CheckpointMeta) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model, meta)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(RiskModel, CheckpointMeta)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
