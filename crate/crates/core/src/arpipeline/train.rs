use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use candle_core::{Device, DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, load_optimizer_state, save_checkpoint};
use super::model::NextViewModel;
use super::optim::{cosine_restart_lr, AdamW, AdamWConfig};
use crate::diffusion::{add_noise, gaussian, training_loss, v_target};
use crate::error::{bail_arg, bail_shape, Error, Result};
use crate::gridops::{images_to_tensor, tile_row, RowImage, ViewImage};
use crate::poseplan::{step_plan, CameraPose, SequenceOrder, NUM_STEPS};
use crate::seeding::{stream, tag};
use crate::synthdata::Sample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Steps between warm restarts of the cosine schedule.
    pub restart_period: usize,
    pub min_lr_ratio: f64,
    pub optimizer: AdamWConfig,
    /// Gradients with a larger global norm are rescaled to this norm.
    pub grad_clip: f64,
    pub seed: u64,
    /// Conditions are downscaled to a side drawn from this range, then
    /// brought back to the view size.
    pub resize_min: usize,
    pub resize_max: usize,
    /// Token sampling proportion used while training.
    pub alpha: f64,
    pub order: SequenceOrder,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            learning_rate: 2e-4,
            restart_period: 1000,
            min_lr_ratio: 0.05,
            optimizer: AdamWConfig::default(),
            grad_clip: 1.0,
            seed: 0,
            resize_min: 16,
            resize_max: 64,
            alpha: 1.0,
            order: SequenceOrder::Normal,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resize_min == 0 || self.resize_min > self.resize_max {
            bail_arg!(
                "resize range [{}, {}] must be non-empty and positive",
                self.resize_min,
                self.resize_max
            );
        }
        if self.batch_size == 0 {
            bail_arg!("batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            bail_arg!("alpha must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) {
            bail_arg!("learning_rate and grad_clip must be positive");
        }
        Ok(())
    }
}

/// Where a condition image came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// The user-supplied input view.
    Input,
    /// A ground-truth render (teacher forcing).
    GroundTruth,
    /// A view produced by the model at an earlier step.
    Generated,
}

#[derive(Debug, Clone)]
pub struct ConditionView {
    pub image: ViewImage,
    pub pose: CameraPose,
    /// Combined view id (1 is the input).
    pub view_id: usize,
    pub provenance: Provenance,
}

#[derive(Debug, Clone)]
pub struct TrainExample {
    pub k: usize,
    pub conditions: Vec<ConditionView>,
    /// Elevations of the non-input conditions.
    pub elevations: Vec<f64>,
    pub target_row: RowImage,
    /// Canonical target indices (0-based) in the row, left to right.
    pub target_canonical: [usize; 2],
    pub resize_side: usize,
}

fn at_size(view: &ViewImage, side: usize) -> Result<ViewImage> {
    if view.side() == side {
        Ok(view.clone())
    } else {
        ViewImage::new(view.image().resize(side, side))
    }
}

/// Teacher-forced example for step `k`: the first `2k - 1` views of the
/// generation sequence are conditions, the next two form the target row.
pub fn build_example(
    sample: &Sample,
    k: usize,
    order: SequenceOrder,
    resize: (usize, usize),
    view_size: usize,
    rng: &mut impl Rng,
) -> Result<TrainExample> {
    let plan = step_plan(k)?;
    let seq = order.sequence_to_canonical();
    let side = rng.random_range(resize.0..=resize.1);
    let degrade = |v: &ViewImage| -> Result<ViewImage> {
        ViewImage::new(v.image().resize(side, side).resize(view_size, view_size))
    };
    let mut conditions = Vec::with_capacity(plan.num_conditions());
    for &id in &plan.condition_view_ids {
        let (image, pose, provenance) = if id == 1 {
            (&sample.input_view, sample.input_pose, Provenance::Input)
        } else {
            let c = seq[id - 2];
            (&sample.target_views[c], sample.target_poses[c], Provenance::GroundTruth)
        };
        conditions.push(ConditionView {
            image: degrade(image)?,
            pose,
            view_id: id,
            provenance,
        });
    }
    let target_canonical = plan.target_view_ids.map(|id| seq[id - 2]);
    let target_row = tile_row(
        &at_size(&sample.target_views[target_canonical[0]], view_size)?,
        &at_size(&sample.target_views[target_canonical[1]], view_size)?,
    )?;
    Ok(TrainExample {
        k,
        elevations: conditions[1..].iter().map(|c| c.pose.elevation_deg).collect(),
        conditions,
        target_row,
        target_canonical,
        resize_side: side,
    })
}

/// Examples sharing one `k`, as tensors in [-1, 1].
#[derive(Debug, Clone)]
pub struct ExampleBatch {
    pub k: usize,
    /// One `(B, 3, V, V)` tensor per condition position, input first.
    pub conditions: Vec<Tensor>,
    pub elevations: Vec<f64>,
    pub target: Tensor,
}

impl ExampleBatch {
    pub fn batch_size(&self) -> usize {
        self.target.dim(0).expect("rank 4")
    }
}

pub fn collate(examples: &[TrainExample], device: &Device, dtype: DType) -> Result<ExampleBatch> {
    let Some(first) = examples.first() else {
        bail_shape!("empty batch");
    };
    if examples
        .iter()
        .any(|e| e.k != first.k || e.elevations != first.elevations)
    {
        bail_shape!("a batch must share one step index and condition layout");
    }
    let conditions = (0..first.conditions.len())
        .map(|j| {
            let imgs: Vec<_> = examples.iter().map(|e| e.conditions[j].image.image()).collect();
            images_to_tensor(&imgs, device, dtype)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<_> = examples.iter().map(|e| e.target_row.image()).collect();
    Ok(ExampleBatch {
        k: first.k,
        conditions,
        elevations: first.elevations.clone(),
        target: images_to_tensor(&rows, device, dtype)?,
    })
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: Tensor,
    pub ts: Vec<usize>,
}

/// v-prediction loss of one batch.
///
/// Random draws, in order: one t per example, the target noise, one noise
/// tensor per condition view, then a seed for token sampling. Conditions
/// are noised at their example's t; the global condition sees them clean.
pub fn batch_loss(
    model: &NextViewModel,
    batch: &ExampleBatch,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<LossOutput> {
    let schedule = model.schedule();
    let (dev, dtype) = (model.device(), model.dtype());
    let b = batch.batch_size();
    let ts: Vec<usize> = (0..b)
        .map(|_| rng.random_range(1..=schedule.num_steps()))
        .collect();
    let eps = gaussian(rng, batch.target.dims(), dev, dtype)?;
    let noised = batch
        .conditions
        .iter()
        .map(|c| {
            let n = gaussian(rng, c.dims(), dev, dtype)?;
            add_noise(c, &ts, &n, schedule)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut merge_rng = ChaCha8Rng::seed_from_u64(rng.random());

    let context = model.global_condition(&batch.conditions, &batch.elevations)?;
    let merged = model.local_condition(&noised, &ts, &context, alpha, &mut merge_rng)?;
    let x_t = add_noise(&batch.target, &ts, &eps, schedule)?;
    let v = v_target(&batch.target, &eps, &ts, schedule)?;
    let v_hat = model.denoise(&x_t, &ts, &context, &merged)?;
    Ok(LossOutput {
        loss: training_loss(&v_hat, &v)?,
        ts,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    /// Number of completed optimizer steps after this one.
    pub step: usize,
    pub loss: f64,
    pub k: usize,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    #[serde(flatten)]
    pub report: StepReport,
    pub elapsed_ms: u64,
    pub unix_ms: u64,
}

pub struct Trainer {
    model: NextViewModel,
    optimizer: AdamW,
    config: TrainConfig,
    data: Vec<Sample>,
    step: usize,
}

impl Trainer {
    pub fn new(model: NextViewModel, data: Vec<Sample>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            bail_arg!("training data is empty");
        }
        let optimizer = AdamW::new(model.named_vars(), config.optimizer.clone())?;
        Ok(Self {
            model,
            optimizer,
            config,
            data,
            step: 0,
        })
    }

    /// Continue from a checkpoint written by [`Trainer::save`].
    pub fn resume(dir: &Path, data: Vec<Sample>, config: TrainConfig) -> Result<Self> {
        let (model, meta) = load_checkpoint(dir)?;
        let mut trainer = Self::new(model, data, config)?;
        trainer
            .optimizer
            .load_state(load_optimizer_state(dir)?, meta.step)?;
        trainer.step = meta.step;
        Ok(trainer)
    }

    pub fn model(&self) -> &NextViewModel {
        &self.model
    }

    pub fn into_model(self) -> NextViewModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// The batch used at optimizer step `step`, plus the stream for the
    /// loss's own draws. Depends only on the seed and the step.
    pub fn batch_for_step(&self, step: usize) -> Result<(ExampleBatch, ChaCha8Rng)> {
        let mut rng = stream(self.config.seed, &[tag::TRAIN_STEP, step as u64]);
        let k = rng.random_range(1..=NUM_STEPS);
        let examples = (0..self.config.batch_size)
            .map(|_| {
                let s = &self.data[rng.random_range(0..self.data.len())];
                build_example(
                    s,
                    k,
                    self.config.order,
                    (self.config.resize_min, self.config.resize_max),
                    self.model.config().view_size,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = collate(&examples, self.model.device(), self.model.dtype())?;
        Ok((batch, rng))
    }

    pub fn learning_rate(&self, step: usize) -> f64 {
        cosine_restart_lr(
            self.config.learning_rate,
            step,
            self.config.restart_period,
            self.config.min_lr_ratio,
        )
    }

    pub fn train_step(&mut self) -> Result<StepReport> {
        let (batch, mut rng) = self.batch_for_step(self.step)?;
        let out = batch_loss(&self.model, &batch, self.config.alpha, &mut rng)?;
        let loss = out.loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let non_finite = |grad_norm: f64| Error::NonFinite {
            step: self.step,
            t: out.ts.clone(),
            k: batch.k,
            grad_norm,
        };
        if !loss.is_finite() {
            return Err(non_finite(f64::NAN));
        }
        let grads = out.loss.backward()?;
        let grad_norm = self.optimizer.grad_norm(&grads)?;
        if !grad_norm.is_finite() {
            return Err(non_finite(grad_norm));
        }
        let lr = self.learning_rate(self.step);
        let scale = if grad_norm > self.config.grad_clip {
            self.config.grad_clip / grad_norm
        } else {
            1.0
        };
        self.optimizer.step(&grads, lr, scale)?;
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            loss,
            k: batch.k,
            lr,
            grad_norm,
        })
    }

    /// Mean loss over a fixed set of batches (every sample at every k, with
    /// draws from `seed`); no parameters change.
    pub fn evaluate(&self, samples: &[Sample], seed: u64) -> Result<f64> {
        evaluate_loss(&self.model, samples, &self.config, seed)
    }

    pub fn save(&self, dir: &Path, config_hash: &str) -> Result<()> {
        save_checkpoint(dir, &self.model, Some(&self.optimizer), self.step, config_hash)
    }

    /// Train until `until` completed steps, appending one JSON line per step
    /// to `out/train_log.jsonl` and writing checkpoints to
    /// `out/checkpoints/step-NNNNNN` every `checkpoint_every` steps and at
    /// the end. Returns the last checkpoint written.
    pub fn run(
        &mut self,
        until: usize,
        out: &Path,
        config_hash: &str,
        mut on_step: impl FnMut(&StepReport),
    ) -> Result<Option<PathBuf>> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let log_path = out.join("train_log.jsonl");
        let mut log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let start = Instant::now();
        let start_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        let mut last = None;
        while self.step < until {
            let report = self.train_step()?;
            let elapsed_ms = start.elapsed().as_millis() as u64;
            let record = LogRecord {
                report: report.clone(),
                elapsed_ms,
                unix_ms: start_unix + elapsed_ms,
            };
            let line = serde_json::to_string(&record).expect("serializable record");
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
            on_step(&report);
            let every = self.config.checkpoint_every;
            if (every > 0 && self.step % every == 0) || self.step == until {
                let dir = checkpoint_dir(out, self.step);
                self.save(&dir, config_hash)?;
                last = Some(dir);
            }
        }
        Ok(last)
    }
}

pub fn checkpoint_dir(out: &Path, step: usize) -> PathBuf {
    out.join("checkpoints").join(format!("step-{step:06}"))
}

/// Mean loss over every sample at every step index, with all randomness
/// drawn from `seed`.
pub fn evaluate_loss(
    model: &NextViewModel,
    samples: &[Sample],
    config: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    if samples.is_empty() {
        bail_arg!("no samples to evaluate");
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for k in 1..=NUM_STEPS {
        for (c, chunk) in samples.chunks(config.batch_size).enumerate() {
            let mut rng = stream(seed, &[tag::TRAIN_STEP, u64::MAX, k as u64, c as u64]);
            let examples = chunk
                .iter()
                .map(|s| {
                    build_example(
                        s,
                        k,
                        config.order,
                        (config.resize_min, config.resize_max),
                        model.config().view_size,
                        &mut rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = collate(&examples, model.device(), model.dtype())?;
            let out = batch_loss(model, &batch, config.alpha, &mut rng)?;
            total += out.loss.to_dtype(DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
            count += chunk.len();
        }
    }
    Ok(total / count as f64)
}
