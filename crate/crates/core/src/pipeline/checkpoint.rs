//! Checkpoints are single safetensors files: `param/<name>` for every model
//! parameter, `adam_m/<name>` and `adam_v/<name>` for the optimizer moments,
//! and the run config plus training state as JSON in the header metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::error::{MgtrError, Result};

pub const FORMAT: &str = "mgtr-checkpoint-1";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Optimizer steps taken.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    /// Batches of the current (incomplete) epoch already consumed.
    pub batch_in_epoch: u64,
    pub best_map: Option<f64>,
    pub best_step: Option<u64>,
    pub evals_since_best: u64,
}

pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: BTreeMap<String, Tensor>,
}

fn err(path: &Path, msg: impl Into<String>) -> MgtrError {
    MgtrError::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn save_checkpoint(
    path: &Path,
    config: &RunConfig,
    state: &TrainState,
    params: &BTreeMap<String, Tensor>,
    optimizer: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(params.len() + optimizer.len());
    for (k, t) in params {
        tensors.push((format!("param/{k}"), t.contiguous()?));
    }
    for (k, t) in optimizer {
        tensors.push((k.clone(), t.contiguous()?));
    }
    let metadata = HashMap::from([
        ("format".to_string(), FORMAT.to_string()),
        ("config".to_string(), serde_json::to_string(config)?),
        ("state".to_string(), serde_json::to_string(state)?),
    ]);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    // write then rename, so an interrupted save never clobbers the last good file
    let tmp = path.with_extension("safetensors.tmp");
    safetensors::serialize_to_file(tensors, Some(metadata), &tmp).map_err(|e| err(path, e.to_string()))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| err(path, e.to_string()))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| err(path, e.to_string()))?;
    let meta = header
        .metadata()
        .as_ref()
        .ok_or_else(|| err(path, "missing metadata"))?;
    if meta.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(err(path, format!("not a {FORMAT} file")));
    }
    let field = |k: &str| meta.get(k).ok_or_else(|| err(path, format!("metadata lacks {k:?}")));
    let config: RunConfig = serde_json::from_str(field("config")?)?;
    let state: TrainState = serde_json::from_str(field("state")?)?;
    let mut params = BTreeMap::new();
    let mut optimizer = BTreeMap::new();
    for (name, t) in candle_core::safetensors::load_buffer(&bytes, device)? {
        if let Some(p) = name.strip_prefix("param/") {
            params.insert(p.to_string(), t);
        } else {
            optimizer.insert(name, t);
        }
    }
    Ok(Checkpoint {
        config,
        state,
        params,
        optimizer,
    })
}
