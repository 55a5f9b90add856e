//! Full training-state checkpoints as versioned JSON.
//!
//! A checkpoint carries everything needed to resume bit-identically:
//! parameters, optimizer moments, the trainer RNG position and the config.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::policy::{OptimizerState, PolicyParams};
use crate::trainer::TrainState;
use crate::{FipoError, Result, SCHEMA_VERSION};

pub const FORMAT: &str = "fipo-checkpoint";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    format: String,
    schema_version: u32,
    step: u64,
    config: RunConfig,
    params: Vec<f64>,
    optimizer: OptimizerState,
    rng: ChaCha8Rng,
    ref_params: Option<Vec<f64>>,
}

pub fn to_json(state: &TrainState) -> Result<String> {
    let doc = Document {
        format: FORMAT.to_string(),
        schema_version: SCHEMA_VERSION,
        step: state.step,
        config: state.config.clone(),
        params: state.params.values().to_vec(),
        optimizer: state.optimizer.clone(),
        rng: state.rng.clone(),
        ref_params: state.ref_params.as_ref().map(|p| p.values().to_vec()),
    };
    Ok(serde_json::to_string(&doc)?)
}

pub fn from_json(text: &str) -> Result<TrainState> {
    let doc: Document = serde_json::from_str(text).map_err(|e| FipoError::Checkpoint(format!("unreadable: {e}")))?;
    if doc.format != FORMAT {
        return Err(FipoError::Checkpoint(format!("format `{}` is not `{FORMAT}`", doc.format)));
    }
    if doc.schema_version != SCHEMA_VERSION {
        return Err(FipoError::Checkpoint(format!(
            "schema_version {} is not supported (expected {SCHEMA_VERSION})",
            doc.schema_version
        )));
    }
    doc.config
        .validate()
        .map_err(|e| FipoError::Checkpoint(format!("embedded config: {e}")))?;
    let dims = doc.config.policy;
    let shape = |what: &str, e: FipoError| FipoError::Checkpoint(format!("{what}: {e}"));
    let params = PolicyParams::from_values(dims, doc.params).map_err(|e| shape("params", e))?;
    let ref_params = doc
        .ref_params
        .map(|v| PolicyParams::from_values(dims, v).map_err(|e| shape("ref_params", e)))
        .transpose()?;
    let n = params.len();
    if doc.optimizer.first_moment.len() != n || doc.optimizer.second_moment.len() != n {
        return Err(FipoError::Checkpoint(format!(
            "optimizer moments have lengths {} / {}, expected {n}",
            doc.optimizer.first_moment.len(),
            doc.optimizer.second_moment.len()
        )));
    }
    Ok(TrainState {
        config: doc.config,
        params,
        optimizer: doc.optimizer,
        rng: doc.rng,
        step: doc.step,
        ref_params,
    })
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| FipoError::io(parent, e))?;
    }
    // write then rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, to_json(state)?).map_err(|e| FipoError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| FipoError::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let text = std::fs::read_to_string(path).map_err(|e| FipoError::io(path, e))?;
    from_json(&text)
}
