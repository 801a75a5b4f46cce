//! Small UNet denoiser predicting v.
//!
//! Layout for `L` levels: a stride-2 patch stem, one residual block per
//! level (stride-2 downsampling between levels), and a transformer block
//! (self-attention, cross-attention, feed-forward) at the coarsest level in
//! the down path, the middle, and the up path. The output is restored to
//! full resolution with a pixel shuffle.
//!
//! Every self-attention layer has a stable [`LayerId`]. A reference pass
//! records the projected K/V of each layer into a [`ReferenceCache`]; a
//! denoising pass can prepend merged reference K/V to its own K/V before
//! attending.

mod attention;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{conv2d, linear, Conv2d, Conv2dConfig, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

pub use attention::{multi_head_attention, CrossAttention, SelfAttention};

use crate::conditioning::MergedCache;
use crate::error::{bail_arg, bail_shape, Error, Result};
use crate::nn::{from_tokens, pixel_shuffle, to_tokens, upsample2x, GroupNorm, LayerNorm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub heads: usize,
    /// Cross-attention context width D.
    pub context_dim: usize,
    pub time_embed_dim: usize,
    pub norm_groups: usize,
    pub ff_mult: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            channel_mults: vec![1, 2],
            heads: 2,
            context_dim: 64,
            time_embed_dim: 64,
            norm_groups: 8,
            ff_mult: 2,
        }
    }
}

impl UNetConfig {
    pub fn level_channels(&self) -> Vec<usize> {
        self.channel_mults.iter().map(|m| m * self.base_channels).collect()
    }

    /// Attention width at the coarsest level (D_i for every layer).
    pub fn attention_dim(&self) -> usize {
        *self.level_channels().last().expect("at least one level")
    }

    /// Spatial reduction between the input and the attention level.
    pub fn attention_stride(&self) -> usize {
        1 << self.channel_mults.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_mults.is_empty() {
            bail_arg!("channel_mults must list at least one level");
        }
        if self.attention_dim() % self.heads != 0 {
            bail_arg!(
                "attention dim {} not divisible by {} heads",
                self.attention_dim(),
                self.heads
            );
        }
        if self.time_embed_dim % 2 != 0 {
            bail_arg!("time_embed_dim must be even");
        }
        for c in self.level_channels() {
            if c % self.norm_groups != 0 {
                bail_arg!("{c} channels not divisible by {} norm groups", self.norm_groups);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerId(pub usize);

/// Recorded K/V of one self-attention layer, each `(B, L_i, D_i)`.
#[derive(Debug, Clone)]
pub struct LayerKv {
    pub id: LayerId,
    pub k: Tensor,
    pub v: Tensor,
}

impl LayerKv {
    pub fn tokens(&self) -> usize {
        self.k.dim(1).expect("rank 3")
    }
}

#[derive(Debug, Clone)]
pub struct ReferenceCache {
    pub layers: Vec<LayerKv>,
    /// Timestep per batch element at which the reference was noised.
    pub timesteps: Vec<usize>,
}

impl ReferenceCache {
    pub fn layer(&self, id: LayerId) -> Option<&LayerKv> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn layer_ids(&self) -> Vec<LayerId> {
        self.layers.iter().map(|l| l.id).collect()
    }

    pub fn batch_size(&self) -> usize {
        self.layers.first().map_or(0, |l| l.k.dim(0).expect("rank 3"))
    }

    /// Split a cache recorded over `n * B` stacked images (image-major) into
    /// `n` caches of batch `B`.
    pub fn split(&self, n: usize) -> Result<Vec<ReferenceCache>> {
        let total = self.batch_size();
        if n == 0 || total % n != 0 {
            bail_shape!("cannot split batch {total} into {n} caches");
        }
        let b = total / n;
        (0..n)
            .map(|j| {
                Ok(ReferenceCache {
                    layers: self
                        .layers
                        .iter()
                        .map(|l| {
                            Ok(LayerKv {
                                id: l.id,
                                k: l.k.narrow(0, j * b, b)?,
                                v: l.v.narrow(0, j * b, b)?,
                            })
                        })
                        .collect::<Result<_>>()?,
                    timesteps: self.timesteps[j * b..(j + 1) * b].to_vec(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(vb: VarBuilder, cin: usize, cout: usize, cfg: &UNetConfig) -> Result<Self> {
        let pad = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let in_groups = gcd(cin, cfg.norm_groups);
        Ok(Self {
            norm1: GroupNorm::new(vb.pp("norm1"), cin, in_groups)?,
            conv1: conv2d(cin, cout, 3, pad, vb.pp("conv1"))?,
            time_proj: linear(cfg.time_embed_dim, cout, vb.pp("time_proj"))?,
            norm2: GroupNorm::new(vb.pp("norm2"), cout, cfg.norm_groups)?,
            conv2: conv2d(cout, cout, 3, pad, vb.pp("conv2"))?,
            skip: if cin != cout {
                Some(conv2d(cin, cout, 1, Default::default(), vb.pp("skip"))?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.time_proj.forward(&temb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Debug, Clone)]
struct TransformerBlock {
    id: LayerId,
    norm1: LayerNorm,
    attn: SelfAttention,
    cross: CrossAttention,
    norm3: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

/// What a forward pass does with its self-attention K/V.
#[derive(Clone, Copy)]
enum KvMode<'a> {
    Plain,
    Record,
    Stacked(&'a MergedCache),
}

impl TransformerBlock {
    fn new(vb: VarBuilder, id: LayerId, dim: usize, cfg: &UNetConfig) -> Result<Self> {
        let hidden = dim * cfg.ff_mult;
        Ok(Self {
            id,
            norm1: LayerNorm::new(vb.pp("norm1"), dim)?,
            attn: SelfAttention::new(vb.pp("attn"), dim, cfg.heads)?,
            cross: CrossAttention::new(vb.pp("cross"), dim, cfg.context_dim, cfg.heads)?,
            norm3: LayerNorm::new(vb.pp("norm3"), dim)?,
            ff_in: linear(dim, hidden, vb.pp("ff_in"))?,
            ff_out: linear(hidden, dim, vb.pp("ff_out"))?,
        })
    }

    fn forward(
        &self,
        x: &Tensor,
        context: &Tensor,
        mode: KvMode,
        recorded: &mut Vec<LayerKv>,
    ) -> Result<Tensor> {
        let (_b, _c, h, w) = x.dims4()?;
        let tokens = to_tokens(x)?;
        let normed = self.norm1.forward(&tokens)?;
        let attended = match mode {
            KvMode::Plain => self.attn.forward_with_reference(&normed, None)?,
            KvMode::Record => {
                let (q, k, v) = self.attn.project(&normed)?;
                recorded.push(LayerKv {
                    id: self.id,
                    k: k.clone(),
                    v: v.clone(),
                });
                self.attn.attend(&q, &k, &v)?
            }
            KvMode::Stacked(merged) => {
                let layer = merged.layer(self.id).ok_or_else(|| {
                    Error::Shape(format!("merged cache has no entry for layer {:?}", self.id))
                })?;
                self.attn
                    .forward_with_reference(&normed, Some((&layer.k, &layer.v)))?
            }
        };
        let tokens = (tokens + attended)?;
        let tokens = self.cross.forward(&tokens, context)?;
        let ff = self
            .ff_out
            .forward(&self.ff_in.forward(&self.norm3.forward(&tokens)?)?.gelu_erf()?)?;
        let tokens = (tokens + ff)?;
        Ok(from_tokens(&tokens, h, w)?)
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    num_timesteps: usize,
    time_in: Linear,
    time_out: Linear,
    stem: Conv2d,
    down: Vec<ResBlock>,
    downsample: Vec<Conv2d>,
    down_attn: TransformerBlock,
    mid_attn: TransformerBlock,
    mid_res: ResBlock,
    up: Vec<ResBlock>,
    upsample: Vec<Conv2d>,
    up_attn: TransformerBlock,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl UNet {
    pub fn new(vb: VarBuilder, config: &UNetConfig, num_timesteps: usize) -> Result<Self> {
        config.validate()?;
        let chans = config.level_channels();
        let levels = chans.len();
        let pad = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let stride2 = Conv2dConfig {
            padding: 1,
            stride: 2,
            ..Default::default()
        };
        let temb = config.time_embed_dim;
        let attn_dim = config.attention_dim();

        let mut down = Vec::with_capacity(levels);
        let mut downsample = Vec::new();
        let mut prev = chans[0];
        for (l, &c) in chans.iter().enumerate() {
            down.push(ResBlock::new(vb.pp(format!("down.{l}.res")), prev, c, config)?);
            if l + 1 < levels {
                downsample.push(conv2d(c, c, 3, stride2, vb.pp(format!("down.{l}.downsample")))?);
            }
            prev = c;
        }
        let mut up = Vec::with_capacity(levels);
        let mut upsample = Vec::new();
        let mut cur = attn_dim;
        for l in (0..levels).rev() {
            up.push(ResBlock::new(
                vb.pp(format!("up.{l}.res")),
                cur + chans[l],
                chans[l],
                config,
            )?);
            cur = chans[l];
            if l > 0 {
                upsample.push(conv2d(cur, cur, 3, pad, vb.pp(format!("up.{l}.upsample")))?);
            }
        }
        Ok(Self {
            config: config.clone(),
            num_timesteps,
            time_in: linear(temb, temb, vb.pp("time.in"))?,
            time_out: linear(temb, temb, vb.pp("time.out"))?,
            stem: conv2d(
                3,
                chans[0],
                2,
                Conv2dConfig {
                    stride: 2,
                    ..Default::default()
                },
                vb.pp("stem"),
            )?,
            down,
            downsample,
            down_attn: TransformerBlock::new(vb.pp("down.attn"), LayerId(0), attn_dim, config)?,
            mid_attn: TransformerBlock::new(vb.pp("mid.attn"), LayerId(1), attn_dim, config)?,
            mid_res: ResBlock::new(vb.pp("mid.res"), attn_dim, attn_dim, config)?,
            up,
            upsample,
            up_attn: TransformerBlock::new(vb.pp("up.attn"), LayerId(2), attn_dim, config)?,
            out_norm: GroupNorm::new(vb.pp("out.norm"), chans[0], config.norm_groups)?,
            out_conv: conv2d(chans[0], 3 * 4, 3, pad, vb.pp("out.conv"))?,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn layer_ids(&self) -> Vec<LayerId> {
        vec![self.down_attn.id, self.mid_attn.id, self.up_attn.id]
    }

    /// Attention-level token count for an `h x w` input.
    pub fn tokens_for(&self, h: usize, w: usize) -> usize {
        let s = self.config.attention_stride();
        (h / s) * (w / s)
    }

    pub fn cross_attention(&self, id: LayerId) -> Option<&CrossAttention> {
        self.blocks().into_iter().find(|b| b.id == id).map(|b| &b.cross)
    }

    pub fn self_attention(&self, id: LayerId) -> Option<&SelfAttention> {
        self.blocks().into_iter().find(|b| b.id == id).map(|b| &b.attn)
    }

    fn blocks(&self) -> [&TransformerBlock; 3] {
        [&self.down_attn, &self.mid_attn, &self.up_attn]
    }

    fn time_embedding(&self, ts: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let dim = self.config.time_embed_dim;
        let half = dim / 2;
        let mut data = Vec::with_capacity(ts.len() * dim);
        for &t in ts {
            for i in 0..half {
                let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
                data.push((t as f64 * freq).sin());
            }
            for i in 0..half {
                let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
                data.push((t as f64 * freq).cos());
            }
        }
        let emb = Tensor::from_vec(data, (ts.len(), dim), device)?.to_dtype(dtype)?;
        Ok(self.time_out.forward(&self.time_in.forward(&emb)?.silu()?)?)
    }

    fn check_inputs(&self, x: &Tensor, ts: &[usize], context: &Tensor) -> Result<()> {
        let (b, c, h, w) = x.dims4()?;
        let s = self.config.attention_stride();
        if c != 3 || h % s != 0 || w % s != 0 {
            bail_shape!("input {:?} must be (B, 3, H, W) with H, W divisible by {s}", x.dims());
        }
        if ts.len() != b {
            bail_shape!("{} timesteps for batch {b}", ts.len());
        }
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > self.num_timesteps) {
            bail_arg!("timestep {t} outside 1..={}", self.num_timesteps);
        }
        let (bc, _m, d) = context.dims3()?;
        if bc != b || d != self.config.context_dim {
            bail_shape!(
                "context {:?} incompatible with batch {b} and dim {}",
                context.dims(),
                self.config.context_dim
            );
        }
        Ok(())
    }

    /// Returns the v prediction (unless `stop_early`) and any recorded K/V.
    fn run(
        &self,
        x: &Tensor,
        ts: &[usize],
        context: &Tensor,
        mode: KvMode,
        stop_early: bool,
    ) -> Result<(Option<Tensor>, Vec<LayerKv>)> {
        self.check_inputs(x, ts, context)?;
        let temb = self.time_embedding(ts, x.dtype(), x.device())?;
        let mut recorded = Vec::new();
        let levels = self.down.len();

        let mut h = self.stem.forward(x)?;
        let mut skips = Vec::with_capacity(levels);
        for l in 0..levels {
            h = self.down[l].forward(&h, &temb)?;
            if l + 1 == levels {
                h = self.down_attn.forward(&h, context, mode, &mut recorded)?;
            }
            skips.push(h.clone());
            if l + 1 < levels {
                h = self.downsample[l].forward(&h)?;
            }
        }
        h = self.mid_attn.forward(&h, context, mode, &mut recorded)?;
        h = self.mid_res.forward(&h, &temb)?;
        for (i, l) in (0..levels).rev().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = self.up[i].forward(&Tensor::cat(&[&h, &skip], 1)?, &temb)?;
            if i == 0 {
                h = self.up_attn.forward(&h, context, mode, &mut recorded)?;
                if stop_early {
                    return Ok((None, recorded));
                }
            }
            if l > 0 {
                h = self.upsample[i].forward(&upsample2x(&h)?)?;
            }
        }
        let out = self.out_conv.forward(&self.out_norm.forward(&h)?.silu()?)?;
        Ok((Some(pixel_shuffle(&out, 2)?), recorded))
    }

    /// Reference pass: run the (already noised) reference through the network
    /// and keep each self-attention layer's K/V. The v output is not needed,
    /// so the pass stops after the last attention layer.
    pub fn forward_record(&self, x_t: &Tensor, ts: &[usize], context: &Tensor) -> Result<ReferenceCache> {
        let (_, layers) = self.run(x_t, ts, context, KvMode::Record, true)?;
        Ok(ReferenceCache {
            layers,
            timesteps: ts.to_vec(),
        })
    }

    /// Denoising pass. With a merged cache every self-attention layer attends
    /// over `concat(reference K/V, own K/V)`.
    pub fn forward_denoise(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        context: &Tensor,
        merged: Option<&MergedCache>,
    ) -> Result<Tensor> {
        let mode = match merged {
            Some(m) => {
                if m.layer_ids() != self.layer_ids() {
                    bail_shape!(
                        "merged cache layers {:?} do not match network layers {:?}",
                        m.layer_ids(),
                        self.layer_ids()
                    );
                }
                KvMode::Stacked(m)
            }
            None => KvMode::Plain,
        };
        let (out, _) = self.run(x_t, ts, context, mode, false)?;
        Ok(out.expect("full pass"))
    }
}
