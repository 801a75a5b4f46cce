use candle_core::{Module, Tensor, D};
use candle_nn::{linear, linear_no_bias, Linear, VarBuilder};

use crate::error::{bail_shape, Result};
use crate::nn::LayerNorm;

/// Multi-head scaled dot-product attention over projected tensors
/// `q: (B, Lq, C)`, `k, v: (B, Lk, C)`. Returns `(B, Lq, C)` before the
/// output projection.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, lq, c) = q.dims3()?;
    let (bk, lk, ck) = k.dims3()?;
    if bk != b || ck != c || v.dims() != k.dims() {
        bail_shape!(
            "attention q {:?}, k {:?}, v {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        );
    }
    if c % heads != 0 {
        bail_shape!("dim {c} not divisible by {heads} heads");
    }
    let dh = c / heads;
    let split = |t: &Tensor, l: usize| -> candle_core::Result<Tensor> {
        t.reshape((b, l, heads, dh))?.transpose(1, 2)?.contiguous()
    };
    let (qh, kh, vh) = (split(q, lq)?, split(k, lk)?, split(v, lk)?);
    let scores = (qh.matmul(&kh.t()?)? * (1.0 / (dh as f64).sqrt()))?;
    let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
    let out = weights.matmul(&vh)?;
    Ok(out.transpose(1, 2)?.reshape((b, lq, c))?)
}

/// Self-attention whose key/value sequence may be extended with recorded
/// reference tokens.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    heads: usize,
    dim: usize,
}

impl SelfAttention {
    pub fn new(vb: VarBuilder, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            to_q: linear_no_bias(dim, dim, vb.pp("to_q"))?,
            to_k: linear_no_bias(dim, dim, vb.pp("to_k"))?,
            to_v: linear_no_bias(dim, dim, vb.pp("to_v"))?,
            to_out: linear(dim, dim, vb.pp("to_out"))?,
            heads,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Q, K, V for normalized tokens `(B, L, C)`.
    pub fn project(&self, h: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        Ok((
            self.to_q.forward(h)?,
            self.to_k.forward(h)?,
            self.to_v.forward(h)?,
        ))
    }

    /// Self-attention over normalized tokens `h`, with reference keys and
    /// values `(B, L_r, C)` placed before the layer's own: `K* = [K_r; K]`.
    pub fn forward_with_reference(&self, h: &Tensor, reference: Option<(&Tensor, &Tensor)>) -> Result<Tensor> {
        let (q, k, v) = self.project(h)?;
        let Some((rk, rv)) = reference else {
            return self.attend(&q, &k, &v);
        };
        if rk.dim(0)? != k.dim(0)? || rv.dims() != rk.dims() {
            bail_shape!(
                "reference K {:?} / V {:?} for denoising batch {}",
                rk.dims(),
                rv.dims(),
                k.dim(0)?
            );
        }
        self.attend(&q, &Tensor::cat(&[rk, &k], 1)?, &Tensor::cat(&[rv, &v], 1)?)
    }

    /// `O = out_proj(Attention(Q, K*, V*))`.
    pub fn attend(&self, q: &Tensor, k_star: &Tensor, v_star: &Tensor) -> Result<Tensor> {
        if q.dim(D::Minus1)? != self.dim || k_star.dim(D::Minus1)? != self.dim {
            bail_shape!(
                "self-attention expects dim {}, got q {:?} k {:?}",
                self.dim,
                q.dims(),
                k_star.dims()
            );
        }
        let a = multi_head_attention(q, k_star, v_star, self.heads)?;
        Ok(self.to_out.forward(&a)?)
    }
}

/// Cross-attention from hidden tokens to the global condition, with the
/// residual added: `hidden + out(Attention(q(norm(hidden)), k(T), v(T)))`.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    norm: LayerNorm,
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    heads: usize,
    dim: usize,
    context_dim: usize,
}

impl CrossAttention {
    pub fn new(vb: VarBuilder, dim: usize, context_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(vb.pp("norm"), dim)?,
            to_q: linear_no_bias(dim, dim, vb.pp("to_q"))?,
            to_k: linear_no_bias(context_dim, dim, vb.pp("to_k"))?,
            to_v: linear(context_dim, dim, vb.pp("to_v"))?,
            to_out: linear_no_bias(dim, dim, vb.pp("to_out"))?,
            heads,
            dim,
            context_dim,
        })
    }

    pub fn forward(&self, hidden: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, _l, c) = hidden.dims3()?;
        let (bc, _m, d) = context.dims3()?;
        if c != self.dim || d != self.context_dim || bc != b {
            bail_shape!(
                "cross-attention hidden {:?} vs context {:?} (dims {} / {})",
                hidden.dims(),
                context.dims(),
                self.dim,
                self.context_dim
            );
        }
        let q = self.to_q.forward(&self.norm.forward(hidden)?)?;
        let k = self.to_k.forward(context)?;
        let v = self.to_v.forward(context)?;
        let a = multi_head_attention(&q, &k, &v, self.heads)?;
        Ok((hidden + self.to_out.forward(&a)?)?)
    }
}
