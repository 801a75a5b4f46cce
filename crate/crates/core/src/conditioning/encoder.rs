use candle_core::{Module, Tensor};
use candle_nn::{conv2d, linear, Conv2d, Conv2dConfig, Linear, VarBuilder};

use crate::error::{bail_shape, Result};

/// Trainable convolutional image encoder producing one global feature
/// vector per image (three stride-2 convolutions, global average pooling,
/// linear head).
#[derive(Debug, Clone)]
pub struct GlobalEncoder {
    convs: Vec<Conv2d>,
    head: Linear,
    out_dim: usize,
}

impl GlobalEncoder {
    pub fn new(vb: VarBuilder, channels: usize, out_dim: usize) -> Result<Self> {
        let cfg = Conv2dConfig {
            padding: 1,
            stride: 2,
            ..Default::default()
        };
        let widths = [3, channels, 2 * channels, 2 * channels];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| conv2d(w[0], w[1], 3, cfg, vb.pp(format!("conv{i}"))))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            convs,
            head: linear(2 * channels, out_dim, vb.pp("head"))?,
            out_dim,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// `(B, 3, H, W)` in [-1, 1] to `(B, D)`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let (_b, c, _h, _w) = images.dims4()?;
        if c != 3 {
            bail_shape!("encoder expects RGB input, got {c} channels");
        }
        let mut h = images.clone();
        for conv in &self.convs {
            h = conv.forward(&h)?.silu()?;
        }
        let pooled = h.mean((2, 3))?;
        Ok(self.head.forward(&pooled)?)
    }
}
