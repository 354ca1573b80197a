use rand::Rng;
use serde::{Deserialize, Serialize};

use super::second_order::{SecondOrderCache, SecondOrderHead};
use crate::error::{Error, Result};
use crate::numerics::layers::FfnCache;
use crate::numerics::ops::{dot, LayerNormCache};
use crate::numerics::param::impl_param_set;
use crate::numerics::{Ffn, LayerNorm, Matrix, Param};

/// One cascade stage: `M` weighted second-order heads followed by
/// residual/layer-norm and feed-forward sublayers.
///
/// ```text
/// u   = LN1(q + Σ_m beta_m · head_m(q, ctx))
/// out = LN2(u + FFN(u))
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReaderUnitParams {
    pub heads: Vec<SecondOrderHead>,
    pub beta: Param,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub ffn: Ffn,
}

impl_param_set!(ReaderUnitParams { heads, beta, ln1, ln2, ffn });

pub struct ReaderCache {
    heads: Vec<(Matrix, SecondOrderCache)>,
    ln1: LayerNormCache,
    ffn: FfnCache,
    ln2: LayerNormCache,
}

impl ReaderUnitParams {
    /// `beta` starts at `1/M` for every head.
    pub fn new<R: Rng + ?Sized>(d: usize, d_k: usize, m: usize, rng: &mut R) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("reader unit needs at least one head (M >= 1)".into()));
        }
        let heads = (0..m).map(|_| SecondOrderHead::new(d, d_k, rng)).collect();
        Ok(ReaderUnitParams {
            heads,
            beta: Param::new(Matrix::filled(1, m, 1.0 / m as f64)),
            ln1: LayerNorm::new(d),
            ln2: LayerNorm::new(d),
            ffn: Ffn::new(d, d, d, rng),
        })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn forward(&self, q: &Matrix, ctx: &Matrix) -> Result<(Matrix, ReaderCache)> {
        let mut residual = q.clone();
        let mut heads = Vec::with_capacity(self.heads.len());
        for (m, head) in self.heads.iter().enumerate() {
            let (z, cache) = head.forward(q, ctx)?;
            residual.axpy(self.beta.value.get(0, m), &z)?;
            heads.push((z, cache));
        }
        let (u, ln1) = self.ln1.forward(&residual)?;
        let (f, ffn) = self.ffn.forward(&u)?;
        let (out, ln2) = self.ln2.forward(&u.add(&f)?)?;
        Ok((out, ReaderCache { heads, ln1, ffn, ln2 }))
    }

    pub fn backward(&mut self, cache: &ReaderCache, dout: &Matrix) -> Result<Matrix> {
        let dsum2 = self.ln2.backward(&cache.ln2, dout)?;
        let mut du = dsum2.clone();
        du.add_assign(&self.ffn.backward(&cache.ffn, &dsum2)?)?;
        let dsum1 = self.ln1.backward(&cache.ln1, &du)?;

        let mut dq = dsum1.clone();
        let mut dbeta = Matrix::zeros(1, self.heads.len());
        for (m, (head, (z, hc))) in self.heads.iter_mut().zip(&cache.heads).enumerate() {
            dbeta.set(0, m, dot(dsum1.data(), z.data()));
            let dz = dsum1.scale(self.beta.value.get(0, m));
            dq.add_assign(&head.backward(hc, &dz)?)?;
        }
        self.beta.accumulate(&dbeta)?;
        Ok(dq)
    }
}

pub fn reader_unit(q: &Matrix, ctx: &Matrix, p: &ReaderUnitParams) -> Result<Matrix> {
    Ok(p.forward(q, ctx)?.0)
}
