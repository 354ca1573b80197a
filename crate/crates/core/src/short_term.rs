//! Short-term local aggregation.
//!
//! Each actor feature queries the dense clip feature map through a bilinear
//! attention (`softmax(V·W_A·Xᵀ)`), gathers a projected context vector,
//! and the concatenation `[V, V_s]` is pushed through a small perceptron
//! and an affine head to produce the short-term class logits `Z_s`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::numerics::layers::FfnCache;
use crate::numerics::ops::{matmul, matmul_nt, matmul_tn, softmax_rows, softmax_rows_backward};
use crate::numerics::param::impl_param_set;
use crate::numerics::{Dense, Ffn, Matrix, Param};

/// Dense clip features, one row per grid cell.
///
/// Row index of cell `(t, h, w)` is `(t * H + h) * W + w`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipFeatureMap {
    h: usize,
    w: usize,
    t: usize,
    x: Matrix,
}

impl ClipFeatureMap {
    pub fn new(h: usize, w: usize, t: usize, x: Matrix) -> Result<Self> {
        if h * w * t == 0 {
            return Err(Error::InvalidArgument(format!(
                "clip grid {h}x{w}x{t} has no cells"
            )));
        }
        if x.rows() != h * w * t {
            return Err(Error::dim("ClipFeatureMap", (h * w * t, x.cols()), x.shape()));
        }
        Ok(ClipFeatureMap { h, w, t, x })
    }

    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }
    pub fn t(&self) -> usize {
        self.t
    }
    pub fn d(&self) -> usize {
        self.x.cols()
    }
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.t)
    }
    pub fn cells(&self) -> usize {
        self.h * self.w * self.t
    }
    pub fn features(&self) -> &Matrix {
        &self.x
    }

    #[inline]
    pub fn index(&self, t: usize, h: usize, w: usize) -> usize {
        (t * self.h + h) * self.w + w
    }

    pub fn cell(&self, t: usize, h: usize, w: usize) -> &[f64] {
        self.x.row(self.index(t, h, w))
    }

    pub fn scaled(&self, alpha: f64) -> ClipFeatureMap {
        ClipFeatureMap {
            x: self.x.scale(alpha),
            ..*self
        }
    }
}

/// Pooled actor features and their key-frame boxes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorSet {
    v: Matrix,
    boxes: Vec<BBox>,
}

impl ActorSet {
    pub fn new(v: Matrix, boxes: Vec<BBox>) -> Result<Self> {
        if v.rows() != boxes.len() {
            return Err(Error::InvalidArgument(format!(
                "{} actor features but {} boxes",
                v.rows(),
                boxes.len()
            )));
        }
        Ok(ActorSet { v, boxes })
    }

    pub fn features(&self) -> &Matrix {
        &self.v
    }
    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }
    pub fn len(&self) -> usize {
        self.boxes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
    pub fn d(&self) -> usize {
        self.v.cols()
    }

    pub fn permuted(&self, order: &[usize]) -> ActorSet {
        ActorSet {
            v: self.v.select_rows(order),
            boxes: order.iter().map(|&i| self.boxes[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShortTermParams {
    pub w_a: Param,
    pub w_v: Param,
    pub ffn: Ffn,
    pub head: Dense,
    /// Multiply attention logits by `1/sqrt(d)`.
    pub attn_scale: bool,
}

impl_param_set!(ShortTermParams { w_a, w_v, ffn, head });

impl ShortTermParams {
    pub fn new<R: Rng + ?Sized>(d: usize, classes: usize, attn_scale: bool, rng: &mut R) -> Self {
        ShortTermParams {
            w_a: Param::new(Matrix::glorot(d, d, rng)),
            w_v: Param::new(Matrix::glorot(d, d, rng)),
            ffn: Ffn::new(2 * d, d, d, rng),
            head: Dense::new(d, classes, rng),
            attn_scale,
        }
    }

    pub fn zeros(d: usize, classes: usize, attn_scale: bool) -> Self {
        ShortTermParams {
            w_a: Param::zeros(d, d),
            w_v: Param::zeros(d, d),
            ffn: Ffn {
                l1: Dense::zeros(2 * d, d),
                l2: Dense::zeros(d, d),
            },
            head: Dense::zeros(d, classes),
            attn_scale,
        }
    }

    pub fn d(&self) -> usize {
        self.w_a.value.rows()
    }

    pub fn classes(&self) -> usize {
        self.head.out_dim()
    }

    pub fn logit_scale(&self) -> f64 {
        if self.attn_scale {
            1.0 / (self.d() as f64).sqrt()
        } else {
            1.0
        }
    }
}

/// Row-stochastic actor-to-cell attention, `N x (h*w*t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub a: Matrix,
    pub dims: (usize, usize, usize),
}

fn check_d(op: &'static str, have: usize, want: usize) -> Result<()> {
    if have != want {
        return Err(Error::dim(op, (0, have), (0, want)));
    }
    Ok(())
}

/// `A = softmax(scale · V·W_A·Xᵀ)`.
pub fn attention_map(x: &ClipFeatureMap, actors: &Matrix, p: &ShortTermParams) -> Result<AttentionMap> {
    attention_parts(x, actors, p)
}

fn attention_parts(x: &ClipFeatureMap, actors: &Matrix, p: &ShortTermParams) -> Result<AttentionMap> {
    check_d("attention_map", actors.cols(), x.d())?;
    check_d("attention_map(W_A)", p.d(), x.d())?;
    let vw = matmul(actors, &p.w_a.value)?;
    let logits = matmul_nt(&vw, x.features())?.scale(p.logit_scale());
    let a = softmax_rows(&logits)?;
    Ok(AttentionMap { a, dims: x.dims() })
}

/// `V_s = A · (X·W_V)`.
pub fn aggregate(a: &AttentionMap, x: &ClipFeatureMap, p: &ShortTermParams) -> Result<Matrix> {
    Ok(aggregate_parts(a, x, p)?.1)
}

fn aggregate_parts(a: &AttentionMap, x: &ClipFeatureMap, p: &ShortTermParams) -> Result<(Matrix, Matrix)> {
    if a.dims != x.dims() {
        return Err(Error::InvalidArgument(format!(
            "attention grid {:?} does not match clip grid {:?}",
            a.dims,
            x.dims()
        )));
    }
    let projected = matmul(x.features(), &p.w_v.value)?;
    let vs = matmul(&a.a, &projected)?;
    Ok((projected, vs))
}

/// `Z_s = head(FFN([V, V_s]))`.
pub fn short_term_logits(actors: &Matrix, vs: &Matrix, p: &ShortTermParams) -> Result<Matrix> {
    let joined = actors.concat_cols(vs)?;
    let (f, _) = p.ffn.forward(&joined)?;
    p.head.forward(&f)
}

/// Everything the branch backward pass needs.
pub struct ShortTermCache {
    x: Matrix,
    actors: Matrix,
    attention: AttentionMap,
    projected: Matrix,
    ffn: FfnCache,
    fused: Matrix,
}

impl ShortTermCache {
    pub fn attention(&self) -> &AttentionMap {
        &self.attention
    }
}

impl ShortTermParams {
    /// Runs the whole short-term branch and returns `Z_s`.
    pub fn forward(&self, x: &ClipFeatureMap, actors: &Matrix) -> Result<(Matrix, ShortTermCache)> {
        let attention = attention_parts(x, actors, self)?;
        let (projected, vs) = aggregate_parts(&attention, x, self)?;
        let joined = actors.concat_cols(&vs)?;
        let (fused, ffn) = self.ffn.forward(&joined)?;
        let z = self.head.forward(&fused)?;
        Ok((
            z,
            ShortTermCache {
                x: x.features().clone(),
                actors: actors.clone(),
                attention,
                projected,
                ffn,
                fused,
            },
        ))
    }

    /// Accumulates parameter gradients from `dz = dL/dZ_s` and returns
    /// the gradient with respect to the actor features.
    pub fn backward(&mut self, cache: &ShortTermCache, dz: &Matrix) -> Result<Matrix> {
        let d = self.d();
        let dfused = self.head.backward(&cache.fused, dz)?;
        let djoined = self.ffn.backward(&cache.ffn, &dfused)?;
        let (mut dactors, dvs) = djoined.split_cols(d)?;

        let a = &cache.attention.a;
        let da = matmul_nt(&dvs, &cache.projected)?;
        let dprojected = matmul_tn(a, &dvs)?;
        self.w_v.accumulate(&matmul_tn(&cache.x, &dprojected)?)?;

        let dlogits = softmax_rows_backward(a, &da)?.scale(self.logit_scale());
        let dvw = matmul(&dlogits, &cache.x)?;
        self.w_a.accumulate(&matmul_tn(&cache.actors, &dvw)?)?;
        dactors.add_assign(&matmul_nt(&dvw, &self.w_a.value)?)?;
        Ok(dactors)
    }
}

/// One actor's attention row reshaped to `t` grids of `h x w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub frames: Vec<Matrix>,
}

impl Heatmap {
    pub fn flatten(&self) -> Vec<f64> {
        self.frames.iter().flat_map(|f| f.data().iter().copied()).collect()
    }
}

pub fn export_heatmap(a: &AttentionMap, actor_index: usize) -> Result<Heatmap> {
    if actor_index >= a.a.rows() {
        return Err(Error::InvalidArgument(format!(
            "actor index {actor_index} out of range for {} actors",
            a.a.rows()
        )));
    }
    let (h, w, t) = a.dims;
    let row = a.a.row(actor_index);
    let frames = (0..t)
        .map(|ti| Matrix::from_raw(h, w, row[ti * h * w..(ti + 1) * h * w].to_vec()))
        .collect();
    Ok(Heatmap { frames })
}

/// Writes `heatmap_<actor>_<t>.pgm` (plain 16-bit PGM, scaled so the
/// hottest cell of the actor maps to 65535) and `heatmap_<actor>_<t>.csv`
/// with the raw values. Returns the written paths.
pub fn write_heatmap(heatmap: &Heatmap, actor: usize, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let peak = heatmap
        .frames
        .iter()
        .flat_map(|f| f.data().iter().copied())
        .fold(0.0, f64::max);
    let mut written = Vec::new();
    for (ti, frame) in heatmap.frames.iter().enumerate() {
        let pgm = dir.join(format!("heatmap_{actor}_{ti}.pgm"));
        let mut out = fs::File::create(&pgm)?;
        writeln!(out, "P2")?;
        writeln!(out, "{} {}", frame.cols(), frame.rows())?;
        writeln!(out, "65535")?;
        for r in 0..frame.rows() {
            let line: Vec<String> = frame
                .row(r)
                .iter()
                .map(|&v| {
                    let q = if peak > 0.0 { (v / peak * 65535.0).round() } else { 0.0 };
                    (q as u32).to_string()
                })
                .collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        written.push(pgm);

        let csv = dir.join(format!("heatmap_{actor}_{ti}.csv"));
        let mut out = fs::File::create(&csv)?;
        for r in 0..frame.rows() {
            let line: Vec<String> = frame.row(r).iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        written.push(csv);
    }
    Ok(written)
}
