use candle_core::{DType, Device, Tensor};
use candle_nn::VarMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{
    merge_reference_caches, sampled_token_count, Conditioner, ConditionerConfig, GlobalMode, MergedCache,
};
use crate::denoiser::{UNet, UNetConfig};
use crate::diffusion::{NoiseSchedule, ScheduleConfig};
use crate::error::{bail_arg, bail_shape, Result};
use crate::params::{named_vars, parameter_count, seeded_var_builder};
use crate::seeding::{stream, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(&self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub unet: UNetConfig,
    pub conditioner: ConditionerConfig,
    /// Side V of every view; target rows are V x 2V.
    pub view_size: usize,
    pub precision: Precision,
    /// Stack the K/V of every condition view (otherwise only the input's).
    pub stacked_le: bool,
    pub global_mode: GlobalMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            conditioner: ConditionerConfig::default(),
            view_size: 32,
            precision: Precision::F32,
            stacked_le: true,
            global_mode: GlobalMode::LstmGe,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        let s = self.unet.attention_stride();
        if self.view_size == 0 || self.view_size % 2 != 0 || self.view_size % s != 0 {
            bail_arg!("view_size {} must be even and divisible by {s}", self.view_size);
        }
        if self.conditioner.context_tokens == 0 {
            bail_arg!("context_tokens must be positive");
        }
        Ok(())
    }
}

/// Denoiser plus conditioning networks sharing one parameter set.
#[derive(Clone)]
pub struct NextViewModel {
    varmap: VarMap,
    unet: UNet,
    conditioner: Conditioner,
    config: ModelConfig,
    schedule: NoiseSchedule,
    device: Device,
}

impl std::fmt::Debug for NextViewModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NextViewModel")
            .field("config", &self.config)
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

impl NextViewModel {
    pub fn new(config: &ModelConfig, schedule: &ScheduleConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::from_config(schedule)?;
        let device = Device::Cpu;
        let varmap = VarMap::new();
        let vb = seeded_var_builder(
            &varmap,
            stream(seed, &[tag::INIT]),
            config.precision.dtype(),
            &device,
        );
        let unet = UNet::new(vb.pp("unet"), &config.unet, schedule.num_steps())?;
        let conditioner = Conditioner::new(vb.pp("cond"), &config.conditioner, config.unet.context_dim)?;
        Ok(Self {
            varmap,
            unet,
            conditioner,
            config: config.clone(),
            schedule,
            device,
        })
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    pub fn conditioner(&self) -> &Conditioner {
        &self.conditioner
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.config.precision.dtype()
    }

    pub fn parameter_count(&self) -> usize {
        parameter_count(&self.varmap)
    }

    pub fn named_vars(&self) -> Vec<(String, candle_core::Var)> {
        named_vars(&self.varmap)
    }

    /// Global condition `(B, M, D)` from clean condition views.
    pub fn global_condition(&self, conditions: &[Tensor], elevations: &[f64]) -> Result<Tensor> {
        self.conditioner
            .condition(conditions, elevations, self.config.global_mode)
    }

    /// Record reference caches for already-noised condition views (each
    /// `(B, 3, V, V)`, input first) and merge them. Without Stacked-LE only
    /// the input view is recorded. All views go through one batched pass.
    pub fn local_condition(
        &self,
        noised: &[Tensor],
        ts: &[usize],
        context: &Tensor,
        alpha: f64,
        rng: &mut impl Rng,
    ) -> Result<MergedCache> {
        if !(0.0..=1.0).contains(&alpha) {
            bail_arg!("alpha must lie in [0, 1], got {alpha}");
        }
        let Some(first) = noised.first() else {
            bail_shape!("no condition views");
        };
        let (b, _, h, w) = first.dims4()?;
        // At alpha = 0 nothing from later views survives the merge, so they
        // are not recorded at all.
        let keeps_any = sampled_token_count(alpha, self.unet.tokens_for(h, w)) > 0;
        let used = if self.config.stacked_le && keeps_any {
            noised.len()
        } else {
            1
        };
        if ts.len() != b {
            bail_shape!("{} timesteps for batch {b}", ts.len());
        }
        if used == 1 {
            let cache = self.unet.forward_record(first, ts, context)?;
            return Ok(MergedCache::single(&cache));
        }
        let stacked = Tensor::cat(&noised[..used], 0)?;
        let all_ts: Vec<usize> = (0..used).flat_map(|_| ts.iter().copied()).collect();
        let ctx = Tensor::cat(&vec![context.clone(); used], 0)?;
        let caches = self.unet.forward_record(&stacked, &all_ts, &ctx)?.split(used)?;
        merge_reference_caches(&caches, alpha, rng)
    }

    pub fn denoise(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        context: &Tensor,
        merged: &MergedCache,
    ) -> Result<Tensor> {
        self.unet.forward_denoise(x_t, ts, context, Some(merged))
    }

    pub fn load_weights(&mut self, path: &std::path::Path) -> Result<()> {
        self.varmap
            .load(path)
            .map_err(|e| crate::Error::schema(path.display().to_string(), "weights", e.to_string()))
    }

    pub fn save_weights(&self, path: &std::path::Path) -> Result<()> {
        Ok(self.varmap.save(path)?)
    }
}
