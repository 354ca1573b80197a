use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nonlocal::{NLBlockParams, NLCache};
use crate::error::{Error, Result};
use crate::numerics::param::impl_param_set;
use crate::numerics::{Dense, Matrix};

/// A pair of NonLocal blocks whose product realises separable
/// second-order attention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecondOrderHead {
    pub nl1: NLBlockParams,
    pub nl2: NLBlockParams,
}

impl_param_set!(SecondOrderHead { nl1, nl2 });

pub struct SecondOrderCache {
    c1: NLCache,
    c2: NLCache,
    z1: Matrix,
    z2: Matrix,
}

impl SecondOrderHead {
    pub fn new<R: Rng + ?Sized>(d: usize, d_k: usize, rng: &mut R) -> Self {
        SecondOrderHead {
            nl1: NLBlockParams::new(d, d_k, rng),
            nl2: NLBlockParams::new(d, d_k, rng),
        }
    }

    pub fn forward(&self, q: &Matrix, ctx: &Matrix) -> Result<(Matrix, SecondOrderCache)> {
        let (z1, c1) = self.nl1.forward(q, ctx)?;
        let (z2, c2) = self.nl2.forward(q, ctx)?;
        let out = z1.hadamard(&z2)?;
        Ok((out, SecondOrderCache { c1, c2, z1, z2 }))
    }

    pub fn backward(&mut self, cache: &SecondOrderCache, dout: &Matrix) -> Result<Matrix> {
        let dz1 = dout.hadamard(&cache.z2)?;
        let dz2 = dout.hadamard(&cache.z1)?;
        let mut dq = self.nl1.backward(&cache.c1, &dz1)?;
        dq.add_assign(&self.nl2.backward(&cache.c2, &dz2)?)?;
        Ok(dq)
    }
}

/// Linear-time second-order attention: the elementwise product of two
/// first-order NonLocal outputs.
pub fn second_order_decoupled(q: &Matrix, ctx: &Matrix, head: &SecondOrderHead) -> Result<Matrix> {
    Ok(head.forward(q, ctx)?.0)
}

fn affine_rows(x: &Matrix, layer: &Dense) -> Matrix {
    rows_times(x, &layer.w.value, Some(&layer.b.value))
}

fn rows_times(x: &Matrix, w: &Matrix, b: Option<&Matrix>) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w.cols());
    for r in 0..x.rows() {
        for o in 0..w.cols() {
            let mut s = b.map_or(0.0, |b| b.get(0, o));
            for k in 0..w.rows() {
                s += x.get(r, k) * w.get(k, o);
            }
            out.set(r, o, s);
        }
    }
    out
}

/// Brute-force second-order attention summing over every ordered context
/// pair `(j, k)`:
///
/// ```text
/// z_i = Σ_{j,k} s1(i,j) s2(i,k) · (g1(c_j) ⊙ g2(c_k)) / Σ_{j,k} s1(i,j) s2(i,k)
/// ```
///
/// with `s_l(i,j) = exp(theta_l(q_i)·phi_l(c_j) / sqrt(d_k))`. Costs
/// `O(L²·d)` per query; used as a reference for
/// [`second_order_decoupled`]. Refuses an empty context.
pub fn second_order_full(q: &Matrix, ctx: &Matrix, head: &SecondOrderHead) -> Result<Matrix> {
    if ctx.rows() == 0 {
        return Err(Error::InvalidArgument(
            "full second-order attention needs a non-empty context".into(),
        ));
    }
    let d = head.nl1.d();
    if q.cols() != d || ctx.cols() != d {
        return Err(Error::dim("second_order_full", q.shape(), ctx.shape()));
    }
    let l = ctx.rows();
    let q1 = affine_rows(q, &head.nl1.theta);
    let q2 = affine_rows(q, &head.nl2.theta);
    let k1 = rows_times(ctx, &head.nl1.phi.value, None);
    let k2 = rows_times(ctx, &head.nl2.phi.value, None);
    let g1 = affine_rows(ctx, &head.nl1.g);
    let g2 = affine_rows(ctx, &head.nl2.g);
    let scale1 = 1.0 / (head.nl1.d_k() as f64).sqrt();
    let scale2 = 1.0 / (head.nl2.d_k() as f64).sqrt();
    let dotp = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let mut out = Matrix::zeros(q.rows(), d);
    let mut e1 = vec![0.0; l];
    let mut e2 = vec![0.0; l];
    let mut acc = vec![0.0; d];
    for i in 0..q.rows() {
        for j in 0..l {
            e1[j] = dotp(q1.row(i), k1.row(j)) * scale1;
            e2[j] = dotp(q2.row(i), k2.row(j)) * scale2;
        }
        let shift = e1.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            + e2.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        acc.iter_mut().for_each(|a| *a = 0.0);
        let mut total = 0.0;
        for j in 0..l {
            let (gj, ej) = (g1.row(j), e1[j]);
            for k in 0..l {
                let s = (ej + e2[k] - shift).exp();
                total += s;
                let gk = g2.row(k);
                for c in 0..d {
                    acc[c] += s * gj[c] * gk[c];
                }
            }
        }
        for (o, a) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = a / total;
        }
    }
    Ok(out)
}
