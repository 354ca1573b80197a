use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ops::{matmul, matmul_nt, matmul_tn, softmax_rows, softmax_rows_backward};
use crate::numerics::param::impl_param_set;
use crate::numerics::{Dense, Matrix, Param};

/// Embedded-Gaussian NonLocal block: query/key projections `theta`, `phi`
/// of width `d_k` and a value map `g` of width `d`. The key projection has
/// no bias: a shared offset on every key only shifts each softmax row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NLBlockParams {
    pub theta: Dense,
    pub phi: Param,
    pub g: Dense,
}

impl_param_set!(NLBlockParams { theta, phi, g });

pub struct NLCache {
    q: Matrix,
    ctx: Matrix,
    qk: Matrix,
    keys: Matrix,
    values: Matrix,
    weights: Matrix,
}

impl NLBlockParams {
    pub fn new<R: Rng + ?Sized>(d: usize, d_k: usize, rng: &mut R) -> Self {
        NLBlockParams {
            theta: Dense::new(d, d_k, rng),
            phi: Param::new(Matrix::glorot(d, d_k, rng)),
            g: Dense::new(d, d, rng),
        }
    }

    pub fn d(&self) -> usize {
        self.g.in_dim()
    }

    pub fn d_k(&self) -> usize {
        self.theta.out_dim()
    }

    fn check(&self, q: &Matrix, ctx: &Matrix) -> Result<()> {
        if q.cols() != self.d() {
            return Err(Error::dim("nl_attention(query)", q.shape(), self.theta.w.shape()));
        }
        if ctx.cols() != self.d() {
            return Err(Error::dim("nl_attention(context)", ctx.shape(), self.phi.value.shape()));
        }
        Ok(())
    }

    /// Attention weights `softmax(theta(q)·phi(ctx)ᵀ / sqrt(d_k))`, `N x L`.
    pub fn weights(&self, q: &Matrix, ctx: &Matrix) -> Result<Matrix> {
        self.check(q, ctx)?;
        let qk = self.theta.forward(q)?;
        let keys = matmul(ctx, &self.phi.value)?;
        self.weights_from(&qk, &keys)
    }

    fn weights_from(&self, qk: &Matrix, keys: &Matrix) -> Result<Matrix> {
        let scale = 1.0 / (self.d_k() as f64).sqrt();
        softmax_rows(&matmul_nt(qk, keys)?.scale(scale))
    }

    pub fn forward(&self, q: &Matrix, ctx: &Matrix) -> Result<(Matrix, NLCache)> {
        self.check(q, ctx)?;
        let qk = self.theta.forward(q)?;
        let keys = matmul(ctx, &self.phi.value)?;
        let values = self.g.forward(ctx)?;
        let (out, weights) = if ctx.rows() == 0 {
            (Matrix::zeros(q.rows(), self.d()), Matrix::zeros(q.rows(), 0))
        } else {
            let w = self.weights_from(&qk, &keys)?;
            (matmul(&w, &values)?, w)
        };
        Ok((
            out,
            NLCache {
                q: q.clone(),
                ctx: ctx.clone(),
                qk,
                keys,
                values,
                weights,
            },
        ))
    }

    /// Accumulates parameter gradients; returns `d/dq`. The context is
    /// treated as constant.
    pub fn backward(&mut self, cache: &NLCache, dout: &Matrix) -> Result<Matrix> {
        if cache.ctx.rows() == 0 {
            return Ok(Matrix::zeros(cache.q.rows(), cache.q.cols()));
        }
        let dweights = matmul_nt(dout, &cache.values)?;
        let dvalues = matmul_tn(&cache.weights, dout)?;
        self.g.backward(&cache.ctx, &dvalues)?;

        let scale = 1.0 / (self.d_k() as f64).sqrt();
        let dlogits = softmax_rows_backward(&cache.weights, &dweights)?.scale(scale);
        let dqk = matmul(&dlogits, &cache.keys)?;
        let dkeys = matmul_tn(&dlogits, &cache.qk)?;
        self.phi.accumulate(&matmul_tn(&cache.ctx, &dkeys)?)?;
        self.theta.backward(&cache.q, &dqk)
    }
}

/// First-order NonLocal attention of each query row over the context rows.
/// An empty context yields zeros.
pub fn nl_attention(q: &Matrix, ctx: &Matrix, p: &NLBlockParams) -> Result<Matrix> {
    Ok(p.forward(q, ctx)?.0)
}
