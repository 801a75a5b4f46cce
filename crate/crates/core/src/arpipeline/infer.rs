use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::NextViewModel;
use super::train::Provenance;
use crate::diffusion::{add_noise, gaussian, sample, SamplerConfig};
use crate::error::{bail_arg, Result};
use crate::gridops::{images_to_tensor, split_row, tensor_to_images, RowImage, ViewImage};
use crate::poseplan::{reorder, step_plan, target_poses, SequenceOrder, NUM_STEPS, NUM_TARGETS};
use crate::seeding::{stream, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub sampler: SamplerConfig,
    pub alpha: f64,
    /// Draw new token subsets at every denoising timestep instead of once
    /// per generation step.
    pub resample_tokens_per_timestep: bool,
    pub seed: u64,
    pub order: SequenceOrder,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            alpha: 1.0,
            resample_tokens_per_timestep: false,
            seed: 0,
            order: SequenceOrder::Normal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRecord {
    pub view_id: usize,
    /// Canonical target index for generated views; `None` for the input.
    pub canonical: Option<usize>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub k: usize,
    /// Grid row (1-based) produced at this step.
    pub row: usize,
    pub targets: [usize; 2],
    pub conditions: Vec<ConditionRecord>,
    /// `(target t, condition noise t)` for every denoiser call.
    pub noise_levels: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct InferOutput {
    /// Generated views in canonical pose order.
    pub views: [ViewImage; NUM_TARGETS],
    pub trace: Vec<StepTrace>,
}

pub fn infer(model: &NextViewModel, input: &ViewImage, config: &InferConfig) -> Result<InferOutput> {
    infer_with_order(model, input, config.order, config)
}

/// Three-step generation following `order`. Each step conditions on the
/// input and every view generated so far; condition caches are recorded
/// afresh at every sampler timestep, noised to that timestep.
pub fn infer_with_order(
    model: &NextViewModel,
    input: &ViewImage,
    order: SequenceOrder,
    config: &InferConfig,
) -> Result<InferOutput> {
    if !(0.0..=1.0).contains(&config.alpha) {
        bail_arg!("alpha must lie in [0, 1], got {}", config.alpha);
    }
    let v = model.config().view_size;
    let (dev, dtype) = (model.device(), model.dtype());
    let input = if input.side() == v {
        input.clone()
    } else {
        ViewImage::new(input.image().resize(v, v))?
    };
    let seq = order.sequence_to_canonical();
    let rows = reorder(order);
    let poses = target_poses();

    let mut generated: Vec<ViewImage> = Vec::with_capacity(NUM_TARGETS);
    let mut trace = Vec::with_capacity(NUM_STEPS);
    for k in 1..=NUM_STEPS {
        let plan = step_plan(k)?;
        let mut views = vec![&input];
        views.extend(generated.iter());
        let records: Vec<ConditionRecord> = plan
            .condition_view_ids
            .iter()
            .map(|&id| ConditionRecord {
                view_id: id,
                canonical: (id > 1).then(|| seq[id - 2]),
                provenance: if id == 1 {
                    Provenance::Input
                } else {
                    Provenance::Generated
                },
            })
            .collect();
        let elevations: Vec<f64> = records[1..]
            .iter()
            .map(|r| poses[r.canonical.expect("generated")].elevation_deg)
            .collect();
        let clean = views
            .iter()
            .map(|img| images_to_tensor(&[img.image()], dev, dtype))
            .collect::<Result<Vec<_>>>()?;
        let context = model.global_condition(&clean, &elevations)?;

        let mut sampler_rng = stream(config.seed, &[tag::INFER, k as u64, 0]);
        let cond_rng = RefCell::new(stream(config.seed, &[tag::INFER, k as u64, 1]));
        let merge_seed: u64 = stream(config.seed, &[tag::INFER, k as u64, 2]).random();
        let merge_stream = RefCell::new(ChaCha8Rng::seed_from_u64(merge_seed));
        let levels = RefCell::new(Vec::new());
        let model_fn = |x: &candle_core::Tensor, t: usize| {
            let ts = [t];
            let noised = clean
                .iter()
                .map(|c| {
                    let n = gaussian(&mut *cond_rng.borrow_mut(), c.dims(), dev, dtype)?;
                    add_noise(c, &ts, &n, model.schedule())
                })
                .collect::<Result<Vec<_>>>()?;
            let merged = if config.resample_tokens_per_timestep {
                model.local_condition(&noised, &ts, &context, config.alpha, &mut *merge_stream.borrow_mut())?
            } else {
                let mut fixed = ChaCha8Rng::seed_from_u64(merge_seed);
                model.local_condition(&noised, &ts, &context, config.alpha, &mut fixed)?
            };
            levels.borrow_mut().push((t, ts[0]));
            model.denoise(x, &ts, &context, &merged)
        };
        let row = sample(
            model_fn,
            &[1, 3, v, 2 * v],
            model.schedule(),
            &config.sampler,
            &mut sampler_rng,
            dev,
            dtype,
        )?;
        let image = tensor_to_images(&((row * 2.0)? - 1.0)?)?.remove(0);
        let (left, right) = split_row(&RowImage::new(image)?);
        generated.push(left);
        generated.push(right);
        trace.push(StepTrace {
            k,
            row: rows[k - 1],
            targets: plan.target_view_ids.map(|id| seq[id - 2]),
            conditions: records,
            noise_levels: levels.into_inner(),
        });
    }

    let mut canonical: Vec<Option<ViewImage>> = vec![None; NUM_TARGETS];
    for (pos, view) in generated.into_iter().enumerate() {
        canonical[seq[pos]] = Some(view);
    }
    let views = std::array::from_fn(|i| canonical[i].take().expect("every pose generated"));
    Ok(InferOutput { views, trace })
}
