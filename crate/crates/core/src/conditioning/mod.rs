//! Conditioning on the partially generated view sequence.
//!
//! Local: reference K/V caches of all condition views are merged (the input
//! view in full, later views optionally token-subsampled) and prepended to
//! the denoiser's self-attention keys and values.
//!
//! Global: per-view feature vectors are split by elevation into two groups
//! that both start with the input view, each group is summarized by its own
//! LSTM, and the two final hidden states are fused by an MLP and spread over
//! `M` context tokens by a learnable weight column:
//! `T[b, m, :] = W[m] * MLP(concat(I0, I1))[b, :]`.

mod encoder;
mod lstm;
mod merge;

use candle_core::{Module, Tensor};
use candle_nn::{linear, Init, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

pub use encoder::GlobalEncoder;
pub use lstm::Lstm;
pub use merge::{merge_reference_caches, sampled_token_count, MergedCache, MergedLayer};

use crate::error::{bail_arg, bail_shape, Result};
use crate::poseplan::{LOWER_ELEVATION_DEG, UPPER_ELEVATION_DEG};

/// How the global (cross-attention) condition is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalMode {
    /// Elevation-grouped LSTM encoding of every condition view.
    #[default]
    LstmGe,
    /// `W_rep * F`: the global weights repeated over the stacked features.
    Matmul,
    /// Input view only; no sequence encoding.
    None,
}

impl GlobalMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            GlobalMode::LstmGe => "lstm_ge",
            GlobalMode::Matmul => "matmul",
            GlobalMode::None => "none",
        }
    }
}

impl std::str::FromStr for GlobalMode {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm_ge" => Ok(Self::LstmGe),
            "matmul" => Ok(Self::Matmul),
            "none" => Ok(Self::None),
            other => bail_arg!("unknown global mode `{other}` (lstm_ge | matmul | none)"),
        }
    }
}

impl std::fmt::Display for GlobalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionerConfig {
    pub encoder_channels: usize,
    /// Number of context tokens M.
    pub context_tokens: usize,
    /// Hidden width of the fusion MLP, as a multiple of D.
    pub mlp_mult: usize,
}

impl Default for ConditionerConfig {
    fn default() -> Self {
        Self {
            encoder_channels: 16,
            context_tokens: 8,
            mlp_mult: 2,
        }
    }
}

/// The two elevation groups, each `(B, k, D)`, input view first.
#[derive(Debug, Clone)]
pub struct GroupedFeatures {
    pub upper: Tensor,
    pub lower: Tensor,
    /// Positions (into the condition sequence) of each group's entries.
    pub upper_ids: Vec<usize>,
    pub lower_ids: Vec<usize>,
}

/// Split `(B, n, D)` features by elevation. `elevations` covers the views
/// after the input (positions 1..n); the input joins both groups.
pub fn partition(features: &Tensor, elevations: &[f64]) -> Result<GroupedFeatures> {
    let (_b, n, _d) = features.dims3()?;
    if elevations.len() + 1 != n {
        bail_shape!("{} elevations for {n} condition views", elevations.len());
    }
    let mut upper_ids = vec![0];
    let mut lower_ids = vec![0];
    for (j, &e) in elevations.iter().enumerate() {
        if (e - UPPER_ELEVATION_DEG).abs() < 1e-9 {
            upper_ids.push(j + 1);
        } else if (e - LOWER_ELEVATION_DEG).abs() < 1e-9 {
            lower_ids.push(j + 1);
        } else {
            bail_arg!("condition view {} has off-schedule elevation {e}", j + 2);
        }
    }
    if upper_ids.len() != lower_ids.len() || 2 * upper_ids.len() != n + 1 {
        bail_shape!(
            "malformed condition set: groups of {} and {} from {n} views",
            upper_ids.len(),
            lower_ids.len()
        );
    }
    let select = |ids: &[usize]| -> Result<Tensor> {
        let idx = Tensor::from_vec(
            ids.iter().map(|&i| i as u32).collect::<Vec<_>>(),
            ids.len(),
            features.device(),
        )?;
        Ok(features.index_select(&idx, 1)?)
    };
    Ok(GroupedFeatures {
        upper: select(&upper_ids)?,
        lower: select(&lower_ids)?,
        upper_ids,
        lower_ids,
    })
}

/// Spread `(B, D)` over the token axis: `(B, M, D)` with row `m` equal to
/// `weights[m] * x`.
pub fn broadcast_tokens(x: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (_b, d) = x.dims2()?;
    let (m, one) = weights.dims2()?;
    if one != 1 {
        bail_shape!("global weights must be M x 1, got {:?}", weights.dims());
    }
    Ok(x.unsqueeze(1)?
        .broadcast_mul(&weights.reshape((1, m, 1))?)?
        .contiguous()?
        .reshape(((), m, d))?)
}

/// Ablation variant: repeat the `(M, 1)` weights to `(M, n)` and multiply by
/// the stacked `(n, D)` features per batch element.
pub fn matmul_global_variant(features: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (b, n, d) = features.dims3()?;
    let (m, one) = weights.dims2()?;
    if one != 1 {
        bail_shape!("global weights must be M x 1, got {:?}", weights.dims());
    }
    let repeated = weights.broadcast_as((m, n))?.contiguous()?;
    let out = repeated
        .unsqueeze(0)?
        .broadcast_as((b, m, n))?
        .contiguous()?
        .matmul(features)?;
    debug_assert_eq!(out.dims(), &[b, m, d]);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Conditioner {
    encoder: GlobalEncoder,
    lstms: [Lstm; 2],
    mlp_in: Linear,
    mlp_out: Linear,
    global_weights: Tensor,
    context_dim: usize,
}

impl Conditioner {
    pub fn new(vb: VarBuilder, config: &ConditionerConfig, context_dim: usize) -> Result<Self> {
        let d = context_dim;
        let hidden = config.mlp_mult * d;
        Ok(Self {
            encoder: GlobalEncoder::new(vb.pp("encoder"), config.encoder_channels, d)?,
            lstms: [
                Lstm::new(vb.pp("lstm0"), d)?,
                Lstm::new(vb.pp("lstm1"), d)?,
            ],
            mlp_in: linear(2 * d, hidden, vb.pp("mlp.in"))?,
            mlp_out: linear(hidden, d, vb.pp("mlp.out"))?,
            global_weights: vb.get_with_hints(
                (config.context_tokens, 1),
                "global_weights",
                Init::Const(1.0),
            )?,
            context_dim,
        })
    }

    pub fn encoder(&self) -> &GlobalEncoder {
        &self.encoder
    }

    pub fn lstm(&self, l: usize) -> &Lstm {
        &self.lstms[l]
    }

    pub fn global_weights(&self) -> &Tensor {
        &self.global_weights
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    /// Features of each view, `(B, n, D)`. Views are `(B, 3, H, W)` tensors
    /// of identical shape and are encoded as one batch.
    pub fn encode_globals(&self, views: &[Tensor]) -> Result<Tensor> {
        let Some(first) = views.first() else {
            bail_shape!("no condition views to encode");
        };
        let b = first.dim(0)?;
        let stacked = Tensor::cat(views, 0)?;
        let f = self.encoder.forward(&stacked)?;
        Ok(f.reshape((views.len(), b, self.context_dim))?
            .transpose(0, 1)?
            .contiguous()?)
    }

    pub fn lstm_encode(&self, l: usize, group: &Tensor) -> Result<Tensor> {
        self.lstms[l].encode(group)
    }

    pub fn mlp(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.mlp_out.forward(&self.mlp_in.forward(x)?.gelu_erf()?)?)
    }

    /// `T = W * MLP(concat(I0, I1))`.
    pub fn fuse(&self, i0: &Tensor, i1: &Tensor) -> Result<Tensor> {
        if i0.dims() != i1.dims() || i0.dim(1)? != self.context_dim {
            bail_shape!("fuse inputs {:?} and {:?}", i0.dims(), i1.dims());
        }
        let joined = Tensor::cat(&[i0, i1], 1)?;
        broadcast_tokens(&self.mlp(&joined)?, &self.global_weights)
    }

    /// Global condition `(B, M, D)` from the condition views (input first,
    /// then generated views in sequence order) and the elevations of the
    /// non-input views.
    pub fn condition(&self, views: &[Tensor], elevations: &[f64], mode: GlobalMode) -> Result<Tensor> {
        match mode {
            GlobalMode::LstmGe => {
                let f = self.encode_globals(views)?;
                let groups = partition(&f, elevations)?;
                let i0 = self.lstm_encode(0, &groups.upper)?;
                let i1 = self.lstm_encode(1, &groups.lower)?;
                self.fuse(&i0, &i1)
            }
            GlobalMode::Matmul => {
                let f = self.encode_globals(views)?;
                matmul_global_variant(&f, &self.global_weights)
            }
            GlobalMode::None => {
                let f = self.encode_globals(&views[..1])?.squeeze(1)?;
                self.fuse(&f, &f)
            }
        }
    }
}
