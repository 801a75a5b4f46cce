use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, NextViewModel};
use super::optim::AdamW;
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const WEIGHTS: &str = "weights.safetensors";
const OPTIMIZER: &str = "optimizer.safetensors";
const META: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub step: usize,
    pub config_hash: String,
    pub parameter_count: usize,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
}

/// Write `weights.safetensors`, `meta.json` and, when given, the optimizer
/// moments into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    model: &NextViewModel,
    optimizer: Option<&AdamW>,
    step: usize,
    config_hash: &str,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    model.save_weights(&dir.join(WEIGHTS))?;
    if let Some(opt) = optimizer {
        candle_core::safetensors::save(&opt.state_tensors(), dir.join(OPTIMIZER))?;
    }
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        step,
        config_hash: config_hash.to_string(),
        parameter_count: model.parameter_count(),
        model: model.config().clone(),
        schedule: *model.schedule().config(),
    };
    let path = dir.join(META);
    let text = serde_json::to_string_pretty(&meta).expect("serializable meta");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let meta: CheckpointMeta = serde_path_to_error::deserialize(de)
        .map_err(|e| Error::schema(path.display().to_string(), e.path().to_string(), e.inner().to_string()))?;
    if meta.format_version != CHECKPOINT_VERSION {
        return Err(Error::schema(
            path.display().to_string(),
            "format_version",
            format!("unsupported version {}", meta.format_version),
        ));
    }
    Ok(meta)
}

pub fn load_checkpoint(dir: &Path) -> Result<(NextViewModel, CheckpointMeta)> {
    let meta = read_meta(dir)?;
    let mut model = NextViewModel::new(&meta.model, &meta.schedule, 0)?;
    let weights = dir.join(WEIGHTS);
    if !weights.exists() {
        return Err(Error::io(
            &weights,
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing weights"),
        ));
    }
    model.load_weights(&weights)?;
    Ok((model, meta))
}

pub fn load_optimizer_state(dir: &Path) -> Result<HashMap<String, Tensor>> {
    let path = dir.join(OPTIMIZER);
    if !path.exists() {
        return Err(Error::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing optimizer state"),
        ));
    }
    Ok(candle_core::safetensors::load(&path, &Device::Cpu)?)
}
