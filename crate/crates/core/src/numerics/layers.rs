//! Parameterised building blocks shared by both context branches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{self, LayerNormCache};
use super::param::impl_param_set;
use super::{Matrix, Param};
use crate::error::Result;

/// Affine map `x · w + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Param,
    pub b: Param,
}

impl_param_set!(Dense { w, b });

impl Dense {
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Dense {
            w: Param::new(Matrix::glorot(fan_in, fan_out, rng)),
            b: Param::zeros(1, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            w: Param::zeros(fan_in, fan_out),
            b: Param::zeros(1, fan_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.value.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.value.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        ops::linear(x, &self.w.value, &self.b.value)
    }

    /// Accumulates parameter gradients and returns `d/dx`.
    pub fn backward(&mut self, x: &Matrix, dout: &Matrix) -> Result<Matrix> {
        let g = ops::linear_backward(x, &self.w.value, dout)?;
        self.w.accumulate(&g.dw)?;
        self.b.accumulate(&g.dbias)?;
        Ok(g.dx)
    }
}

/// Two-layer perceptron: `Dense -> ReLU -> Dense`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ffn {
    pub l1: Dense,
    pub l2: Dense,
}

impl_param_set!(Ffn { l1, l2 });

pub struct FfnCache {
    x: Matrix,
    pre: Matrix,
    hidden: Matrix,
}

impl Ffn {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut R) -> Self {
        Ffn {
            l1: Dense::new(d_in, d_hidden, rng),
            l2: Dense::new(d_hidden, d_out, rng),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, FfnCache)> {
        let pre = self.l1.forward(x)?;
        let hidden = ops::relu(&pre);
        let out = self.l2.forward(&hidden)?;
        Ok((
            out,
            FfnCache {
                x: x.clone(),
                pre,
                hidden,
            },
        ))
    }

    pub fn backward(&mut self, cache: &FfnCache, dout: &Matrix) -> Result<Matrix> {
        let dhidden = self.l2.backward(&cache.hidden, dout)?;
        let dpre = ops::relu_backward(&cache.pre, &dhidden)?;
        self.l1.backward(&cache.x, &dpre)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

impl_param_set!(LayerNorm { gamma, beta });

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gamma: Param::new(Matrix::filled(1, d, 1.0)),
            beta: Param::zeros(1, d),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, LayerNormCache)> {
        ops::layer_norm(x, &self.gamma.value, &self.beta.value, LAYER_NORM_EPS)
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dout: &Matrix) -> Result<Matrix> {
        let g = ops::layer_norm_backward(cache, &self.gamma.value, dout)?;
        self.gamma.accumulate(&g.dgamma)?;
        self.beta.accumulate(&g.dbeta)?;
        Ok(g.dx)
    }
}
