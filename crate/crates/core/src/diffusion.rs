//! Linear-beta noise schedule, v-parameterization, and a DDIM-style sampler
//! operating directly on pixels (images mapped to [-1, 1]).
//!
//! Timesteps are 1-based: `t` in `1..=T`, with `alpha_bar(t)` the
//! cumulative product of `1 - beta` up to and including step `t`.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, bail_shape, Result};

/// Toy-scale defaults. `TOY_BETA_END` is chosen so that `alpha_bar(T)`
/// matches the terminal value of the standard 1000-step linear schedule
/// (beta 1e-4..0.02), about 4.04e-5.
pub const TOY_STEPS: usize = 64;
pub const TOY_BETA_START: f64 = 1e-4;
pub const TOY_BETA_END: f64 = 0.2842;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: TOY_STEPS,
            beta_start: TOY_BETA_START,
            beta_end: TOY_BETA_END,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
}

pub fn linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        bail_arg!("schedule needs at least 2 steps, got {steps}");
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        bail_arg!("need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}");
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
        .collect();
    let alphas_bar = betas
        .iter()
        .scan(1.0, |acc, b| {
            *acc *= 1.0 - b;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        config: ScheduleConfig {
            steps,
            beta_start,
            beta_end,
        },
        betas,
        alphas_bar,
    })
}

impl NoiseSchedule {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        linear_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            bail_arg!("timestep {t} outside 1..={}", self.num_steps());
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alphas_bar[t - 1])
    }

    /// Per-sample `(sqrt(alpha_bar), sqrt(1 - alpha_bar))` shaped to
    /// broadcast against `(B, C, H, W)`. A single timestep broadcasts over
    /// the whole batch.
    fn coefficients(&self, ts: &[usize], like: &Tensor) -> Result<(Tensor, Tensor)> {
        let b = like.dim(0)?;
        if ts.len() != 1 && ts.len() != b {
            bail_shape!("got {} timesteps for a batch of {b}", ts.len());
        }
        let mut signal = Vec::with_capacity(ts.len());
        let mut noise = Vec::with_capacity(ts.len());
        for &t in ts {
            let ab = self.alpha_bar(t)?;
            signal.push(ab.sqrt());
            noise.push((1.0 - ab).sqrt());
        }
        let mut shape = vec![ts.len()];
        shape.extend(std::iter::repeat_n(1, like.rank() - 1));
        let mk = |v: Vec<f64>| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, shape.as_slice(), like.device())?.to_dtype(like.dtype())?)
        };
        Ok((mk(signal)?, mk(noise)?))
    }
}

/// `x_t = sqrt(ab) * x0 + sqrt(1 - ab) * eps`.
pub fn add_noise(x0: &Tensor, ts: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if x0.dims() != eps.dims() {
        bail_shape!("x0 {:?} vs eps {:?}", x0.dims(), eps.dims());
    }
    let (a, s) = schedule.coefficients(ts, x0)?;
    Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
}

/// `v = sqrt(ab) * eps - sqrt(1 - ab) * x0`.
pub fn v_target(x0: &Tensor, eps: &Tensor, ts: &[usize], schedule: &NoiseSchedule) -> Result<Tensor> {
    if x0.dims() != eps.dims() {
        bail_shape!("x0 {:?} vs eps {:?}", x0.dims(), eps.dims());
    }
    let (a, s) = schedule.coefficients(ts, x0)?;
    Ok((eps.broadcast_mul(&a)? - x0.broadcast_mul(&s)?)?)
}

/// `x0 = sqrt(ab) * x_t - sqrt(1 - ab) * v`.
pub fn x0_from_v(x_t: &Tensor, v: &Tensor, ts: &[usize], schedule: &NoiseSchedule) -> Result<Tensor> {
    if x_t.dims() != v.dims() {
        bail_shape!("x_t {:?} vs v {:?}", x_t.dims(), v.dims());
    }
    let (a, s) = schedule.coefficients(ts, x_t)?;
    Ok((x_t.broadcast_mul(&a)? - v.broadcast_mul(&s)?)?)
}

/// `eps = sqrt(1 - ab) * x_t + sqrt(ab) * v`.
pub fn eps_from_v(x_t: &Tensor, v: &Tensor, ts: &[usize], schedule: &NoiseSchedule) -> Result<Tensor> {
    let (a, s) = schedule.coefficients(ts, x_t)?;
    Ok((x_t.broadcast_mul(&s)? + v.broadcast_mul(&a)?)?)
}

/// Mean squared error, differentiable.
pub fn training_loss(v_hat: &Tensor, v: &Tensor) -> Result<Tensor> {
    if v_hat.dims() != v.dims() {
        bail_shape!("prediction {:?} vs target {:?}", v_hat.dims(), v.dims());
    }
    Ok((v_hat - v)?.sqr()?.mean_all()?)
}

/// Standard normal tensor drawn from `rng` (row-major fill order).
pub fn gaussian(
    rng: &mut impl Rng,
    shape: &[usize],
    device: &Device,
    dtype: DType,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub num_steps: usize,
    /// 0 gives deterministic DDIM updates; 1 matches ancestral sampling.
    pub eta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 16,
            eta: 0.0,
        }
    }
}

/// Evenly spaced descending timesteps, starting at `T`.
pub fn sampling_timesteps(total: usize, num_steps: usize) -> Vec<usize> {
    let mut ts: Vec<usize> = (0..num_steps)
        .map(|j| (total * (num_steps - j)).div_ceil(num_steps))
        .collect();
    ts.dedup();
    ts
}

/// Reverse process from pure noise. `model_fn(x_t, t)` returns the
/// predicted v. The result is mapped back to [0, 1] and clamped.
pub fn sample<F>(
    mut model_fn: F,
    shape: &[usize],
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    rng: &mut impl Rng,
    device: &Device,
    dtype: DType,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    if config.num_steps == 0 || config.num_steps > schedule.num_steps() {
        bail_arg!(
            "sampler steps must be in 1..={}, got {}",
            schedule.num_steps(),
            config.num_steps
        );
    }
    let ts = sampling_timesteps(schedule.num_steps(), config.num_steps);
    let mut x = gaussian(rng, shape, device, dtype)?;
    let mut x0 = x.clone();
    for (j, &t) in ts.iter().enumerate() {
        let v = model_fn(&x, t)?;
        if v.dims() != x.dims() {
            bail_shape!("model returned {:?} for input {:?}", v.dims(), x.dims());
        }
        x0 = x0_from_v(&x, &v, &[t], schedule)?;
        let Some(&t_next) = ts.get(j + 1) else {
            break;
        };
        let eps = eps_from_v(&x, &v, &[t], schedule)?;
        let ab = schedule.alpha_bar(t)?;
        let ab_next = schedule.alpha_bar(t_next)?;
        let sigma = config.eta * ((1.0 - ab_next) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_next).sqrt();
        let dir = (1.0 - ab_next - sigma * sigma).max(0.0).sqrt();
        x = ((&x0 * ab_next.sqrt())? + (eps * dir)?)?;
        if sigma > 0.0 {
            x = (x + (gaussian(rng, shape, device, dtype)? * sigma)?)?;
        }
    }
    Ok(((x0 + 1.0)? * 0.5)?.clamp(0.0, 1.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vals(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn worked_schedule() {
        let s = linear_schedule(4, 0.1, 0.4).unwrap();
        let expect_b = [0.1, 0.2, 0.3, 0.4];
        let expect_ab = [0.9, 0.72, 0.504, 0.3024];
        for i in 0..4 {
            assert!((s.betas()[i] - expect_b[i]).abs() < 1e-15);
            assert!((s.alphas_bar()[i] - expect_ab[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn schedule_errors() {
        assert!(linear_schedule(1, 0.1, 0.2).is_err());
        assert!(linear_schedule(4, 0.2, 0.1).is_err());
        assert!(linear_schedule(4, 0.0, 0.1).is_err());
        assert!(linear_schedule(4, 0.1, 1.0).is_err());
        let s = linear_schedule(4, 0.1, 0.4).unwrap();
        assert!(s.alpha_bar(0).is_err());
        assert!(s.alpha_bar(5).is_err());
    }

    #[test]
    fn toy_terminal_alpha_bar_matches_standard() {
        // brute-force terminal value of the 1000-step schedule
        let mut reference = 1.0f64;
        for i in 0..1000 {
            reference *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        let toy = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        let terminal = toy.alpha_bar(TOY_STEPS).unwrap();
        assert!((terminal / reference - 1.0).abs() < 0.1, "{terminal} vs {reference}");
    }

    #[test]
    fn noise_limits() {
        let dev = Device::Cpu;
        let s = linear_schedule(8, 1e-6, 0.5).unwrap();
        let x0 = Tensor::new(&[[0.3f64, -0.7]], &dev).unwrap();
        let eps = Tensor::new(&[[1.5f64, 0.2]], &dev).unwrap();
        let xt = add_noise(&x0, &[1], &eps, &s).unwrap();
        for (a, b) in vals(&xt).iter().zip(vals(&x0)) {
            assert!((a - b).abs() < 2e-3);
        }
        let zero = x0.zeros_like().unwrap();
        let xt = add_noise(&zero, &[5], &eps, &s).unwrap();
        let scale = (1.0 - s.alpha_bar(5).unwrap()).sqrt();
        for (a, b) in vals(&xt).iter().zip(vals(&eps)) {
            assert!((a - scale * b).abs() < 1e-15);
        }
        assert!(add_noise(&x0, &[9], &eps, &s).is_err());
    }

    #[test]
    fn v_extremes() {
        // alpha_bar == 1 gives v = eps, alpha_bar == 0 gives v = -x0
        let dev = Device::Cpu;
        let mut s = linear_schedule(2, 0.1, 0.2).unwrap();
        s.alphas_bar = vec![1.0, 0.0];
        let x0 = Tensor::new(&[[0.25f64, -0.5]], &dev).unwrap();
        let eps = Tensor::new(&[[0.75f64, 2.0]], &dev).unwrap();
        assert_eq!(vals(&v_target(&x0, &eps, &[1], &s).unwrap()), vals(&eps));
        assert_eq!(
            vals(&v_target(&x0, &eps, &[2], &s).unwrap()),
            vals(&x0.neg().unwrap())
        );
    }

    #[test]
    fn loss_values() {
        let dev = Device::Cpu;
        let v = Tensor::new(&[[0.25f64, -0.5], [1.0, 2.0]], &dev).unwrap();
        let l = training_loss(&v, &v).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(l, 0.0);
        let shifted = (&v + 0.3).unwrap();
        let l = training_loss(&shifted, &v).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 0.09).abs() < 1e-15);
        let bad = Tensor::zeros((2, 3), DType::F64, &dev).unwrap();
        assert!(training_loss(&bad, &v).is_err());
    }

    #[test]
    fn timesteps() {
        assert_eq!(sampling_timesteps(64, 1), vec![64]);
        assert_eq!(sampling_timesteps(64, 4), vec![64, 48, 32, 16]);
        assert_eq!(sampling_timesteps(4, 4), vec![4, 3, 2, 1]);
    }

    #[test]
    fn single_step_is_one_projection() {
        let dev = Device::Cpu;
        let s = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        let cfg = SamplerConfig { num_steps: 1, eta: 0.0 };
        let shape = [1, 3, 2, 4];
        let model = |x: &Tensor, _t: usize| Ok((x * 0.5)?);
        let out = sample(model, &shape, &s, &cfg, &mut ChaCha8Rng::seed_from_u64(4), &dev, DType::F64)
            .unwrap();
        let noise = gaussian(&mut ChaCha8Rng::seed_from_u64(4), &shape, &dev, DType::F64).unwrap();
        let v = (&noise * 0.5).unwrap();
        let x0 = x0_from_v(&noise, &v, &[64], &s).unwrap();
        let expect = ((x0 + 1.0).unwrap() * 0.5).unwrap().clamp(0.0, 1.0).unwrap();
        assert_eq!(vals(&out), vals(&expect));
    }

    #[test]
    fn bad_model_shape() {
        let dev = Device::Cpu;
        let s = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        let model = |_x: &Tensor, _t: usize| Ok(Tensor::zeros((1, 3), DType::F64, &Device::Cpu)?);
        let r = sample(
            model,
            &[1, 3, 2, 2],
            &s,
            &SamplerConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
            &dev,
            DType::F64,
        );
        assert!(r.is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn v_roundtrip(t in 1usize..=64, seed in any::<u64>()) {
            let dev = Device::Cpu;
            let s = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = gaussian(&mut rng, &[2, 3, 4, 4], &dev, DType::F64).unwrap();
            let eps = gaussian(&mut rng, &[2, 3, 4, 4], &dev, DType::F64).unwrap();
            let xt = add_noise(&x0, &[t], &eps, &s).unwrap();
            let v = v_target(&x0, &eps, &[t], &s).unwrap();
            let back = x0_from_v(&xt, &v, &[t], &s).unwrap();
            for (a, b) in vals(&back).iter().zip(vals(&x0)) {
                prop_assert!((a - b).abs() < 1e-10);
            }
            let e = eps_from_v(&xt, &v, &[t], &s).unwrap();
            for (a, b) in vals(&e).iter().zip(vals(&eps)) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn schedule_monotone(steps in 2usize..200, start in 1e-5f64..0.01, span in 1e-4f64..0.5) {
            let s = linear_schedule(steps, start, (start + span).min(0.999)).unwrap();
            for w in s.betas().windows(2) {
                prop_assert!(w[0] < w[1]);
            }
            for w in s.alphas_bar().windows(2) {
                prop_assert!(w[0] > w[1]);
            }
            prop_assert!(s.alphas_bar().iter().all(|&a| a > 0.0 && a < 1.0));
        }
    }
}
