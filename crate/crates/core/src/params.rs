//! Parameter storage with reproducible initialization.
//!
//! candle's CPU random initializers draw from an unseeded generator, so
//! variables are created here from a seeded stream instead, in the order the
//! model constructs them.

use std::sync::Mutex;

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::NormalOrUniform;
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder, VarMap};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

struct SeededBackend {
    varmap: VarMap,
    rng: Mutex<ChaCha8Rng>,
}

fn sample_init(init: Init, shape: &Shape, rng: &mut impl Rng) -> Vec<f64> {
    let n = shape.elem_count();
    let normal = |rng: &mut dyn rand::RngCore, mean: f64, std: f64| -> Vec<f64> {
        let d = Normal::new(mean, std.max(0.0)).expect("finite std");
        (0..n).map(|_| d.sample(rng)).collect()
    };
    let uniform = |rng: &mut dyn rand::RngCore, lo: f64, up: f64| -> Vec<f64> {
        if up <= lo {
            return vec![lo; n];
        }
        let d = Uniform::new(lo, up).expect("ordered bounds");
        (0..n).map(|_| d.sample(rng)).collect()
    };
    match init {
        Init::Const(c) => vec![c; n],
        Init::Randn { mean, stdev } => normal(rng, mean, stdev),
        Init::Uniform { lo, up } => uniform(rng, lo, up),
        Init::Kaiming {
            dist,
            fan,
            non_linearity,
        } => {
            let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
            match dist {
                NormalOrUniform::Normal => normal(rng, 0.0, std),
                NormalOrUniform::Uniform => {
                    let b = 3f64.sqrt() * std;
                    uniform(rng, -b, b)
                }
            }
        }
    }
}

impl SimpleBackend for SeededBackend {
    fn get(
        &self,
        s: Shape,
        name: &str,
        h: Init,
        dtype: DType,
        dev: &Device,
    ) -> candle_core::Result<Tensor> {
        let mut data = self.varmap.data().lock().unwrap();
        if let Some(var) = data.get(name) {
            let t = var.as_tensor();
            if t.shape() != &s {
                candle_core::bail!("shape mismatch for {name}: {:?} vs {:?}", t.shape(), s);
            }
            return Ok(t.clone());
        }
        let values = sample_init(h, &s, &mut *self.rng.lock().unwrap());
        let t = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        data.insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        candle_core::bail!("variable {name} must be created with a shape")
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.varmap.data().lock().unwrap().contains_key(name)
    }
}

/// A builder that registers new variables in `varmap`, initialized from
/// `rng` in creation order.
pub fn seeded_var_builder(
    varmap: &VarMap,
    rng: ChaCha8Rng,
    dtype: DType,
    device: &Device,
) -> VarBuilder<'static> {
    let backend: Box<dyn SimpleBackend> = Box::new(SeededBackend {
        varmap: varmap.clone(),
        rng: Mutex::new(rng),
    });
    VarBuilder::from_backend(backend, dtype, device.clone())
}

/// Variables sorted by name, so iteration order does not depend on hashing.
pub fn named_vars(varmap: &VarMap) -> Vec<(String, Var)> {
    let mut vars: Vec<(String, Var)> = varmap
        .data()
        .lock()
        .unwrap()
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    vars
}

pub fn parameter_count(varmap: &VarMap) -> usize {
    varmap.all_vars().iter().map(|v| v.elem_count()).sum()
}

/// Add `N(0, scale^2)` noise to every variable (name order). Used to move
/// away from constant initial values such as unit norm gains.
pub fn perturb_all(varmap: &VarMap, scale: f64, rng: &mut impl Rng) -> candle_core::Result<()> {
    for (_, var) in named_vars(varmap) {
        let t = var.as_tensor();
        let noise = sample_init(
            Init::Randn {
                mean: 0.0,
                stdev: scale,
            },
            t.shape(),
            rng,
        );
        let noise = Tensor::from_vec(noise, t.shape(), t.device())?.to_dtype(t.dtype())?;
        var.set(&(t + noise)?)?;
    }
    Ok(())
}
