//! Reproducible experiment commands shared by the `nextview` binary:
//! dataset generation, training, inference, evaluation and ablations.

mod ablate;
mod commands;
mod config;

use serde::{Deserialize, Serialize};

pub use ablate::{ablate, format_ablation_table, AblationRow};
pub use commands::{
    evaluate_samples, evaluate_split, gen_data, infer_to_dir, load_split, report, train,
    write_run_record, GenDataSummary, InferSummary, RunRecord, Split, TrainSummary,
};
pub use config::{
    AblationConfig, DataConfig, EvalConfig, EvalMode, ExperimentConfig, Overrides,
};

use crate::arpipeline::ModelConfig;
use crate::conditioning::GlobalMode;
use crate::error::{bail_arg, Error, Result};

/// Conditioning-component ablation arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Input-view reference attention only, no global condition.
    Baseline,
    /// Stacked local conditioning over all condition views.
    StackedLe,
    /// Elevation-grouped LSTM global conditioning.
    LstmGe,
    Both,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Baseline, Arm::StackedLe, Arm::LstmGe, Arm::Both];

    pub fn as_str(&self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::StackedLe => "stacked_le",
            Arm::LstmGe => "lstm_ge",
            Arm::Both => "both",
        }
    }

    /// The arm's model. Arms with global conditioning keep `base`'s global
    /// mode unless it is `none`, in which case LSTM-GE is used.
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let global = match base.global_mode {
            GlobalMode::None => GlobalMode::LstmGe,
            m => m,
        };
        let (stacked_le, global_mode) = match self {
            Arm::Baseline => (false, GlobalMode::None),
            Arm::StackedLe => (true, GlobalMode::None),
            Arm::LstmGe => (false, global),
            Arm::Both => (true, global),
        };
        ModelConfig {
            stacked_le,
            global_mode,
            ..base.clone()
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Arm::Baseline),
            "stacked_le" => Ok(Arm::StackedLe),
            "lstm_ge" => Ok(Arm::LstmGe),
            "both" => Ok(Arm::Both),
            other => bail_arg!("unknown ablation arm `{other}`"),
        }
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}
