use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{LayerId, ReferenceCache};
use crate::error::{bail_arg, bail_shape, Result};

/// Stacked reference K/V for one self-attention layer, `(B, L_m, D_i)`.
#[derive(Debug, Clone)]
pub struct MergedLayer {
    pub id: LayerId,
    pub k: Tensor,
    pub v: Tensor,
    /// Token count of the input view's cache, kept in full at the front.
    pub input_tokens: usize,
    /// Sorted token indices kept from each generated view, in view order.
    pub sampled: Vec<Vec<usize>>,
}

impl MergedLayer {
    pub fn tokens(&self) -> usize {
        self.k.dim(1).expect("rank 3")
    }
}

#[derive(Debug, Clone)]
pub struct MergedCache {
    layers: Vec<MergedLayer>,
    alpha: f64,
}

impl MergedCache {
    /// Only the input view's tokens: the plain single-reference case.
    pub fn single(input: &ReferenceCache) -> Self {
        Self {
            layers: input
                .layers
                .iter()
                .map(|l| MergedLayer {
                    id: l.id,
                    k: l.k.clone(),
                    v: l.v.clone(),
                    input_tokens: l.tokens(),
                    sampled: Vec::new(),
                })
                .collect(),
            alpha: 0.0,
        }
    }

    pub fn layers(&self) -> &[MergedLayer] {
        &self.layers
    }

    pub fn layer(&self, id: LayerId) -> Option<&MergedLayer> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn layer_ids(&self) -> Vec<LayerId> {
        self.layers.iter().map(|l| l.id).collect()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Number of tokens kept from a generated view with `tokens` tokens.
pub fn sampled_token_count(alpha: f64, tokens: usize) -> usize {
    ((alpha * tokens as f64).floor() as usize).min(tokens)
}

/// Merge the caches of `e^1 .. e^{2k-1}` (input view first). Every token of
/// the input view is kept; from each later view `floor(alpha * L_i)` tokens
/// are drawn without replacement, with the same indices for K and V and
/// across the batch. Each view gets its own stream seeded from `rng`.
pub fn merge_reference_caches(
    caches: &[ReferenceCache],
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<MergedCache> {
    if !(0.0..=1.0).contains(&alpha) {
        bail_arg!("alpha must lie in [0, 1], got {alpha}");
    }
    let Some(first) = caches.first() else {
        bail_arg!("at least the input view's cache is required");
    };
    let ids = first.layer_ids();
    let batch = first.batch_size();
    for (j, c) in caches.iter().enumerate().skip(1) {
        if c.layer_ids() != ids {
            bail_shape!("cache {j} has layers {:?}, expected {:?}", c.layer_ids(), ids);
        }
        if c.batch_size() != batch {
            bail_shape!("cache {j} has batch {}, expected {batch}", c.batch_size());
        }
    }
    let mut view_rngs: Vec<ChaCha8Rng> = caches[1..]
        .iter()
        .map(|_| ChaCha8Rng::seed_from_u64(rng.random()))
        .collect();

    let mut layers = Vec::with_capacity(ids.len());
    for (li, &id) in ids.iter().enumerate() {
        let input = &first.layers[li];
        let mut ks = vec![input.k.clone()];
        let mut vs = vec![input.v.clone()];
        let mut sampled = Vec::with_capacity(caches.len() - 1);
        for (cache, vrng) in caches[1..].iter().zip(view_rngs.iter_mut()) {
            let layer = &cache.layers[li];
            let l = layer.tokens();
            let n = sampled_token_count(alpha, l);
            if n == l {
                ks.push(layer.k.clone());
                vs.push(layer.v.clone());
                sampled.push((0..l).collect());
                continue;
            }
            let mut idx = rand::seq::index::sample(vrng, l, n).into_vec();
            idx.sort_unstable();
            if n > 0 {
                let sel = Tensor::from_vec(
                    idx.iter().map(|&i| i as u32).collect::<Vec<_>>(),
                    n,
                    layer.k.device(),
                )?;
                ks.push(layer.k.index_select(&sel, 1)?);
                vs.push(layer.v.index_select(&sel, 1)?);
            }
            sampled.push(idx);
        }
        let (k, v) = if ks.len() == 1 {
            (ks.pop().unwrap(), vs.pop().unwrap())
        } else {
            (Tensor::cat(&ks, 1)?, Tensor::cat(&vs, 1)?)
        };
        layers.push(MergedLayer {
            id,
            k,
            v,
            input_tokens: input.tokens(),
            sampled,
        });
    }
    Ok(MergedCache { layers, alpha })
}
