//! Late fusion of the two branch logits and the training loss.

use crate::error::{Error, Result};
use crate::numerics::{ops, Matrix};

const PROB_CLAMP: f64 = 1e-12;

/// Short- and long-term class logits for the same actors.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextLogits {
    pub z_s: Matrix,
    pub z_l: Matrix,
}

impl ContextLogits {
    pub fn new(z_s: Matrix, z_l: Matrix) -> Result<Self> {
        if z_s.shape() != z_l.shape() {
            return Err(Error::dim("ContextLogits", z_s.shape(), z_l.shape()));
        }
        Ok(ContextLogits { z_s, z_l })
    }
}

/// Binary multi-label targets, `N x c`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSet {
    y: Matrix,
}

impl LabelSet {
    pub fn new(y: Matrix) -> Result<Self> {
        if let Some(v) = y.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(format!("label {v} is not binary")));
        }
        Ok(LabelSet { y })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.y
    }
}

/// `sigmoid(Z_s + Z_l)`
pub fn fuse(z: &ContextLogits) -> Result<Matrix> {
    Ok(ops::sigmoid(&z.z_s.add(&z.z_l)?))
}

pub fn fuse_pair(z_s: &Matrix, z_l: &Matrix) -> Result<Matrix> {
    Ok(ops::sigmoid(&z_s.add(z_l)?))
}

/// Mean binary cross entropy and its gradient w.r.t. the pre-sigmoid logits.
#[derive(Clone, Debug)]
pub struct BceOutput {
    pub loss: f64,
    pub dlogits: Matrix,
}

/// Mean over all `N·c` cells of `-[y ln p + (1-y) ln(1-p)]`, with `p`
/// clamped to `[1e-12, 1 - 1e-12]`. The returned gradient is `(p - y)/(N·c)`.
pub fn bce_loss(probs: &Matrix, labels: &LabelSet) -> Result<BceOutput> {
    bce_loss_normalised(probs, labels, probs.len())
}

/// As [`bce_loss`] but dividing by `denom` cells, so per-clip pieces of a
/// batch add up to the batch mean.
pub fn bce_loss_normalised(probs: &Matrix, labels: &LabelSet, denom: usize) -> Result<BceOutput> {
    let y = labels.matrix();
    if probs.shape() != y.shape() {
        return Err(Error::dim("bce_loss", probs.shape(), y.shape()));
    }
    if probs.rows() == 0 || denom == 0 {
        return Err(Error::InvalidArgument("bce_loss over an empty batch".into()));
    }
    let n = denom as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for (&p, &t) in probs.data().iter().zip(y.data()) {
        let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        loss -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        grad.push((p - t) / n);
    }
    Ok(BceOutput {
        loss: loss / n,
        dlogits: Matrix::from_vec(probs.rows(), probs.cols(), grad)?,
    })
}

/// Thresholded decisions plus the untouched scores used for ranking.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub positive: Matrix,
    pub scores: Matrix,
}

pub fn predict(probs: &Matrix, threshold: f64) -> Result<Prediction> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    Ok(Prediction {
        positive: probs.map(|p| if p >= threshold { 1.0 } else { 0.0 }),
        scores: probs.clone(),
    })
}
