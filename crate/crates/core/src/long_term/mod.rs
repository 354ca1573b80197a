//! Long-term context over a feature bank.
//!
//! First-order NonLocal attention, separable second-order attention (a
//! brute-force pair-sum reference plus the linear-time product of two
//! NonLocal blocks), and a cascade of `K` reader units with `M` weighted
//! second-order heads each, ending in an affine head that produces `Z_l`.

mod nonlocal;
mod reader;
mod second_order;

pub use nonlocal::{nl_attention, NLBlockParams, NLCache};
pub use reader::{reader_unit, ReaderCache, ReaderUnitParams};
pub use second_order::{second_order_decoupled, second_order_full, SecondOrderCache, SecondOrderHead};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::param::impl_param_set;
use crate::numerics::{Dense, Matrix};

/// Context rows gathered from the bank for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureWindow {
    pub ctx: Matrix,
    /// Timestamp of the bank record each row came from, ascending.
    pub source_timestamps: Vec<i64>,
}

impl FeatureWindow {
    pub fn new(ctx: Matrix, source_timestamps: Vec<i64>) -> Result<Self> {
        if ctx.rows() != source_timestamps.len() {
            return Err(Error::InvalidArgument(format!(
                "{} context rows but {} timestamps",
                ctx.rows(),
                source_timestamps.len()
            )));
        }
        Ok(FeatureWindow { ctx, source_timestamps })
    }

    pub fn empty(d: usize) -> Self {
        FeatureWindow {
            ctx: Matrix::zeros(0, d),
            source_timestamps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ctx.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.ctx.rows() == 0
    }
}

/// Shape of the long-term branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LongTermConfig {
    /// Number of cascaded reader units.
    pub k: usize,
    /// Second-order heads per reader unit.
    pub m: usize,
    /// Query/key projection width.
    pub d_k: usize,
}

impl LongTermConfig {
    /// `K = M = 2`, `d_k = d/2`.
    pub fn default_for(d: usize) -> Self {
        LongTermConfig {
            k: 2,
            m: 2,
            d_k: (d / 2).max(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongTermParams {
    pub units: Vec<ReaderUnitParams>,
    pub head: Dense,
}

impl_param_set!(LongTermParams { units, head });

pub struct LongTermCache {
    units: Vec<ReaderCache>,
    last: Matrix,
}

impl LongTermParams {
    pub fn new<R: Rng + ?Sized>(d: usize, classes: usize, cfg: LongTermConfig, rng: &mut R) -> Result<Self> {
        if cfg.k == 0 {
            return Err(Error::Config("long-term branch needs K >= 1".into()));
        }
        if cfg.d_k == 0 {
            return Err(Error::Config("d_k must be >= 1".into()));
        }
        let units = (0..cfg.k)
            .map(|_| ReaderUnitParams::new(d, cfg.d_k, cfg.m, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(LongTermParams {
            units,
            head: Dense::new(d, classes, rng),
        })
    }

    pub fn d(&self) -> usize {
        self.head.in_dim()
    }

    pub fn classes(&self) -> usize {
        self.head.out_dim()
    }

    pub fn config(&self) -> LongTermConfig {
        let first = &self.units[0];
        LongTermConfig {
            k: self.units.len(),
            m: first.num_heads(),
            d_k: first.heads[0].nl1.d_k(),
        }
    }

    /// Cascades the reader units from `q_0 = V` and maps `q_K` to `Z_l`.
    pub fn forward(&self, actors: &Matrix, window: &FeatureWindow) -> Result<(Matrix, LongTermCache)> {
        let mut q = actors.clone();
        let mut caches = Vec::with_capacity(self.units.len());
        for unit in &self.units {
            let (next, cache) = unit.forward(&q, &window.ctx)?;
            caches.push(cache);
            q = next;
        }
        let z = self.head.forward(&q)?;
        Ok((
            z,
            LongTermCache {
                units: caches,
                last: q,
            },
        ))
    }

    /// Accumulates gradients from `dz = dL/dZ_l`; returns `d/dV`.
    pub fn backward(&mut self, cache: &LongTermCache, dz: &Matrix) -> Result<Matrix> {
        let mut dq = self.head.backward(&cache.last, dz)?;
        for (unit, uc) in self.units.iter_mut().zip(&cache.units).rev() {
            dq = unit.backward(uc, &dq)?;
        }
        Ok(dq)
    }
}

pub fn long_term_logits(actors: &Matrix, window: &FeatureWindow, p: &LongTermParams) -> Result<Matrix> {
    Ok(p.forward(actors, window)?.0)
}
