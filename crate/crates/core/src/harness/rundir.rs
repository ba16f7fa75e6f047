//! Run directory layout:
//!
//! ```text
//! <run>/config.json          {schema_version, input, resolved, hash}
//! <run>/metrics.csv          one row per logging interval
//! <run>/updates.csv          one row per gradient update
//! <run>/timing.csv           wall-clock seconds per metrics row
//! <run>/checkpoints/step_<N>.bin
//! <run>/eval.json            {schema_version, env, variant, seed, config_hash, pools}
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::eval::EvalSummary;
use super::model::Model;
use super::HarnessError;

pub const SCHEMA_VERSION: u32 = 1;

pub fn write_config(dir: &Path, input: &Value, cfg: &RunConfig) -> Result<(), HarnessError> {
    let doc = json!({
        "schema_version": SCHEMA_VERSION,
        "input": input,
        "resolved": cfg,
        "hash": cfg.hash(),
    });
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(())
}

/// Reads and re-validates a run's resolved config.
pub fn read_config(dir: &Path) -> Result<RunConfig, HarnessError> {
    let path = dir.join("config.json");
    if !path.is_file() {
        return Err(HarnessError::MissingArtifact(path));
    }
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    let cfg = RunConfig::from_value(&doc["resolved"]).map_err(HarnessError::Config)?;
    if doc["hash"].as_str() != Some(cfg.hash().as_str()) {
        return Err(HarnessError::Invalid(format!(
            "{}: stored hash does not match the resolved config",
            path.display()
        )));
    }
    Ok(cfg)
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("step_{step}.bin"))
}

/// All checkpoints of a run, ordered by step.
pub fn list_checkpoints(dir: &Path) -> Vec<(u64, PathBuf)> {
    let mut out: Vec<(u64, PathBuf)> = std::fs::read_dir(dir.join("checkpoints"))
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let step = name.strip_prefix("step_")?.strip_suffix(".bin")?.parse().ok()?;
            Some((step, e.path()))
        })
        .collect();
    out.sort();
    out
}

/// The run's config and a model restored from its latest checkpoint.
pub fn load_latest(dir: &Path) -> Result<(RunConfig, Model, u64), HarnessError> {
    let cfg = read_config(dir)?;
    let Some((step, path)) = list_checkpoints(dir).pop() else {
        return Err(HarnessError::MissingArtifact(dir.join("checkpoints")));
    };
    let mut model = Model::build(&cfg)?;
    Checkpoint::load(&path)?.restore(&mut model.store, cfg.hash_bytes())?;
    Ok((cfg, model, step))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalFile {
    pub schema_version: u32,
    pub env: String,
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
    pub checkpoint_step: u64,
    pub pools: BTreeMap<String, EvalSummary>,
}

pub fn read_eval(dir: &Path) -> Result<EvalFile, HarnessError> {
    let path = dir.join("eval.json");
    if !path.is_file() {
        return Err(HarnessError::MissingArtifact(path));
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Merges summaries into the run's eval.json, replacing pools evaluated
/// again.
pub fn write_eval(
    dir: &Path,
    cfg: &RunConfig,
    checkpoint_step: u64,
    summaries: &[EvalSummary],
) -> Result<EvalFile, HarnessError> {
    let mut file = match read_eval(dir) {
        Ok(f) if f.config_hash == cfg.hash() && f.checkpoint_step == checkpoint_step => f,
        _ => EvalFile {
            schema_version: SCHEMA_VERSION,
            env: cfg.env.clone(),
            variant: cfg.variant.clone(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            checkpoint_step,
            pools: BTreeMap::new(),
        },
    };
    for s in summaries {
        file.pools.insert(s.pool.name().to_string(), s.clone());
    }
    std::fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&file)? + "\n")?;
    Ok(file)
}
