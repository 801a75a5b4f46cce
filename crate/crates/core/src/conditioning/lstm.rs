use candle_core::{Module, Tensor};
use candle_nn::{linear, linear_no_bias, Linear, VarBuilder};

use crate::error::{bail_shape, Result};
use crate::nn::sigmoid;

/// Single-layer LSTM with hidden size equal to its input size. Gates are
/// laid out as (input, forget, cell, output).
#[derive(Debug, Clone)]
pub struct Lstm {
    input: Linear,
    recurrent: Linear,
    dim: usize,
}

impl Lstm {
    pub fn new(vb: VarBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            input: linear(dim, 4 * dim, vb.pp("w_ih"))?,
            recurrent: linear_no_bias(dim, 4 * dim, vb.pp("w_hh"))?,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// One step: returns `(h, c)`.
    pub fn step(&self, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        let gates = (self.input.forward(x)? + self.recurrent.forward(h)?)?;
        let chunks = gates.chunk(4, 1)?;
        let i = sigmoid(&chunks[0])?;
        let f = sigmoid(&chunks[1])?;
        let g = chunks[2].tanh()?;
        let o = sigmoid(&chunks[3])?;
        let c = ((f * c)? + (i * g)?)?;
        let h = (o * c.tanh()?)?;
        Ok((h, c))
    }

    /// Run over `(B, k, D)` from zero state and return the last hidden state
    /// `(B, D)`.
    pub fn encode(&self, seq: &Tensor) -> Result<Tensor> {
        let (b, k, d) = seq.dims3()?;
        if d != self.dim {
            bail_shape!("LSTM expects dim {}, got {d}", self.dim);
        }
        if k == 0 {
            bail_shape!("LSTM input sequence is empty");
        }
        let mut h = Tensor::zeros((b, d), seq.dtype(), seq.device())?;
        let mut c = h.clone();
        for step in 0..k {
            let x = seq.narrow(1, step, 1)?.squeeze(1)?;
            (h, c) = self.step(&x, &h, &c)?;
        }
        Ok(h)
    }

    #[cfg(test)]
    pub(crate) fn input_bias(&self) -> &Tensor {
        self.input.bias().expect("biased")
    }
}
