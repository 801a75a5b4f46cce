use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arpipeline::{InferConfig, ModelConfig, TrainConfig};
use crate::conditioning::GlobalMode;
use crate::diffusion::ScheduleConfig;
use crate::error::{bail_arg, Error, Result};
use crate::poseplan::SequenceOrder;
use crate::recon3d::{DEFAULT_GRID_RESOLUTION, DEFAULT_SILHOUETTE_THRESHOLD, DEFAULT_SURFACE_POINTS};
use crate::synthdata::RenderConfig;

use super::Arm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub render: RenderConfig,
    /// Dataset root holding `train/` and `test/`; defaults to `<out>/data`.
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_count: 200,
            test_count: 20,
            render: RenderConfig::default(),
            dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Views generated by a checkpoint, hull carved from input + generated.
    Model,
    /// Ground-truth views and surface points as the prediction.
    GroundTruth,
    /// Ground-truth views; hull carved from the ground-truth renders.
    GroundTruthHull,
}

impl EvalMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            EvalMode::Model => "model",
            EvalMode::GroundTruth => "ground_truth",
            EvalMode::GroundTruthHull => "ground_truth_hull",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(Self::Model),
            "ground_truth" => Ok(Self::GroundTruth),
            "ground_truth_hull" => Ok(Self::GroundTruthHull),
            other => bail_arg!("unknown eval mode `{other}`"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub grid_resolution: usize,
    pub surface_points: usize,
    pub silhouette_threshold: f32,
    pub tolerance_px: usize,
    /// Evaluate at most this many samples of the split.
    pub max_samples: Option<usize>,
    pub feature_sim: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: EvalMode::Model,
            grid_resolution: DEFAULT_GRID_RESOLUTION,
            surface_points: DEFAULT_SURFACE_POINTS,
            silhouette_threshold: DEFAULT_SILHOUETTE_THRESHOLD,
            tolerance_px: 0,
            max_samples: None,
            feature_sim: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub arms: Vec<Arm>,
    pub orders: Vec<SequenceOrder>,
    pub alphas: Vec<f64>,
    /// Training steps per (arm, order); `None` uses `train.steps`.
    pub train_steps: Option<usize>,
    /// Test samples evaluated per table cell; `None` uses the whole split.
    pub eval_samples: Option<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            arms: Arm::ALL.to_vec(),
            orders: SequenceOrder::ALL.to_vec(),
            alphas: vec![0.0, 0.3, 1.0],
            train_steps: None,
            eval_samples: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// The one seed every command derives its randomness from; it replaces
    /// the per-section `seed` fields.
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub diffusion: ScheduleConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub ablation: AblationConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            diffusion: ScheduleConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            ablation: AblationConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub order: Option<SequenceOrder>,
    pub alpha: Option<f64>,
    pub mode: Option<GlobalMode>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Config(format!("{origin}: `{}`: {}", e.path(), e.inner())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    /// Apply flag overrides and propagate the global seed.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(order) = o.order {
            self.train.order = order;
            self.infer.order = order;
            self.ablation.orders = vec![order];
        }
        if let Some(alpha) = o.alpha {
            self.infer.alpha = alpha;
            self.ablation.alphas = vec![alpha];
        }
        if let Some(mode) = o.mode {
            self.model.global_mode = mode;
        }
        self.train.seed = self.seed;
        self.infer.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.infer.alpha) {
            bail_arg!("infer.alpha must lie in [0, 1], got {}", self.infer.alpha);
        }
        if self.ablation.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            bail_arg!("ablation.alphas must lie in [0, 1]");
        }
        if self.eval.grid_resolution == 0 || self.eval.surface_points == 0 {
            bail_arg!("eval.grid_resolution and eval.surface_points must be positive");
        }
        if self.data.render.resolution == 0 {
            bail_arg!("data.render.resolution must be positive");
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data.dir.clone().unwrap_or_else(|| self.out.join("data"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// First 16 hex digits of the SHA-256 of the resolved config; the
    /// output directory is excluded so relocated reruns hash alike.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = PathBuf::new();
        canonical.data.dir = None;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
