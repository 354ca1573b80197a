//! Differentiable primitives.
//!
//! Each primitive is available as a pair of pure functions (`foo`,
//! `foo_backward`) used directly by the model code, and as a stateful
//! [`DiffOp`] that records its inputs on `forward` so `backward` can be
//! called with only the upstream gradient.

use crate::error::{Error, Result};

use super::Matrix;

/// `a · b`. Accumulation runs over the inner index in ascending order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(Matrix::from_raw(m, n, out))
}

/// `a · bᵀ`
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::dim("matmul_nt", a.shape(), b.shape()));
    }
    let (m, n) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..n {
            out.push(dot(ar, b.row(j)));
        }
    }
    Ok(Matrix::from_raw(m, n, out))
}

/// `aᵀ · b`
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::dim("matmul_tn", a.shape(), b.shape()));
    }
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let ar = a.row(p);
        let br = b.row(p);
        for (i, &av) in ar.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Ok(Matrix::from_raw(m, n, out))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradients of `a · b` given `d(out)`.
pub fn matmul_backward(a: &Matrix, b: &Matrix, dout: &Matrix) -> Result<(Matrix, Matrix)> {
    Ok((matmul_nt(dout, b)?, matmul_tn(a, dout)?))
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    if m.rows() == 0 {
        return Ok(m.clone());
    }
    if m.cols() == 0 {
        return Err(Error::InvalidArgument(
            "softmax over zero columns is undefined".into(),
        ));
    }
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Backward of row softmax given its output `y`.
pub fn softmax_rows_backward(y: &Matrix, dy: &Matrix) -> Result<Matrix> {
    if y.shape() != dy.shape() {
        return Err(Error::dim("softmax_rows_backward", y.shape(), dy.shape()));
    }
    let mut dx = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let (yr, dyr) = (y.row(r), dy.row(r));
        let inner = dot(yr, dyr);
        for ((d, &yv), &g) in dx.row_mut(r).iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - inner);
        }
    }
    Ok(dx)
}

/// `x · w + bias` with the bias broadcast over rows.
pub fn linear(x: &Matrix, w: &Matrix, bias: &Matrix) -> Result<Matrix> {
    if bias.rows() != 1 || bias.cols() != w.cols() {
        return Err(Error::dim("linear(bias)", w.shape(), bias.shape()));
    }
    matmul(x, w)?.add_row_broadcast(bias)
}

pub struct LinearGrads {
    pub dx: Matrix,
    pub dw: Matrix,
    pub dbias: Matrix,
}

pub fn linear_backward(x: &Matrix, w: &Matrix, dout: &Matrix) -> Result<LinearGrads> {
    Ok(LinearGrads {
        dx: matmul_nt(dout, w)?,
        dw: matmul_tn(x, dout)?,
        dbias: dout.sum_rows(),
    })
}

/// Values kept from a layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

/// Row-wise layer normalisation (biased variance, `eps` inside the root).
pub fn layer_norm(x: &Matrix, gamma: &Matrix, beta: &Matrix, eps: f64) -> Result<(Matrix, LayerNormCache)> {
    let d = x.cols();
    if d == 0 {
        return Err(Error::InvalidArgument("layer_norm needs d >= 1".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
    }
    if gamma.shape() != (1, d) {
        return Err(Error::dim("layer_norm(gamma)", x.shape(), gamma.shape()));
    }
    if beta.shape() != (1, d) {
        return Err(Error::dim("layer_norm(beta)", x.shape(), beta.shape()));
    }
    let mut xhat = Matrix::zeros(x.rows(), d);
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for c in 0..d {
            let h = (row[c] - mean) * is;
            xhat.set(r, c, h);
            out.set(r, c, h * gamma.get(0, c) + beta.get(0, c));
        }
    }
    Ok((out, LayerNormCache { xhat, inv_std }))
}

pub struct LayerNormGrads {
    pub dx: Matrix,
    pub dgamma: Matrix,
    pub dbeta: Matrix,
}

pub fn layer_norm_backward(cache: &LayerNormCache, gamma: &Matrix, dout: &Matrix) -> Result<LayerNormGrads> {
    let xhat = &cache.xhat;
    if dout.shape() != xhat.shape() {
        return Err(Error::dim("layer_norm_backward", xhat.shape(), dout.shape()));
    }
    let d = xhat.cols();
    let mut dx = Matrix::zeros(xhat.rows(), d);
    let mut dgamma = Matrix::zeros(1, d);
    let dbeta = dout.sum_rows();
    let mut dxhat = vec![0.0; d];
    for r in 0..xhat.rows() {
        let (hr, gr) = (xhat.row(r), dout.row(r));
        for c in 0..d {
            dxhat[c] = gr[c] * gamma.get(0, c);
            dgamma.data_mut()[c] += gr[c] * hr[c];
        }
        let s1: f64 = dxhat.iter().sum();
        let s2 = dot(&dxhat, hr);
        let k = cache.inv_std[r] / d as f64;
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = k * (d as f64 * dxhat[c] - s1 - hr[c] * s2);
        }
    }
    Ok(LayerNormGrads { dx, dgamma, dbeta })
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Matrix) -> Matrix {
    x.map(sigmoid_scalar)
}

/// Backward of the logistic function given its output `y`.
pub fn sigmoid_backward(y: &Matrix, dy: &Matrix) -> Result<Matrix> {
    y.zip_map(dy, "sigmoid_backward", |s, g| g * s * (1.0 - s))
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

/// Backward of the rectifier given its input `x`.
pub fn relu_backward(x: &Matrix, dy: &Matrix) -> Result<Matrix> {
    x.zip_map(dy, "relu_backward", |v, g| if v > 0.0 { g } else { 0.0 })
}

impl Matrix {
    fn zip_map(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::dim(op, self.shape(), other.shape()));
        }
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix::from_raw(self.rows(), self.cols(), data))
    }
}

/// A primitive that remembers what it needs from `forward` for `backward`.
pub trait DiffOp: Send {
    fn name(&self) -> &'static str;

    /// Number of inputs expected by `forward`.
    fn arity(&self) -> usize;

    fn forward(&mut self, inputs: &[&Matrix]) -> Result<Matrix>;

    /// Vector-Jacobian products, one per input, in input order.
    fn backward(&self, upstream: &Matrix) -> Result<Vec<Matrix>>;
}

fn check_arity(name: &'static str, want: usize, inputs: &[&Matrix]) -> Result<()> {
    if inputs.len() != want {
        return Err(Error::InvalidArgument(format!(
            "{name} takes {want} inputs, got {}",
            inputs.len()
        )));
    }
    Ok(())
}

#[derive(Default)]
pub struct MatMulOp {
    saved: Option<(Matrix, Matrix)>,
}

impl DiffOp for MatMulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn arity(&self) -> usize {
        2
    }
    fn forward(&mut self, inputs: &[&Matrix]) -> Result<Matrix> {
        check_arity(self.name(), 2, inputs)?;
        let out = matmul(inputs[0], inputs[1])?;
        self.saved = Some((inputs[0].clone(), inputs[1].clone()));
        Ok(out)
    }
    fn backward(&self, upstream: &Matrix) -> Result<Vec<Matrix>> {
        let (a, b) = self.saved.as_ref().ok_or(Error::BackwardBeforeForward { op: "matmul" })?;
        let (da, db) = matmul_backward(a, b, upstream)?;
        Ok(vec![da, db])
    }
}

#[derive(Default)]
pub struct SoftmaxRowsOp {
    saved: Option<Matrix>,
}

impl DiffOp for SoftmaxRowsOp {
    fn name(&self) -> &'static str {
        "softmax_rows"
    }
    fn arity(&self) -> usize {
        1
    }
    fn forward(&mut self, inputs: &[&Matrix]) -> Result<Matrix> {
        check_arity(self.name(), 1, inputs)?;
        let y = softmax_rows(inputs[0])?;
        self.saved = Some(y.clone());
        Ok(y)
    }
    fn backward(&self, upstream: &Matrix) -> Result<Vec<Matrix>> {
        let y = self.saved.as_ref().ok_or(Error::BackwardBeforeForward { op: "softmax_rows" })?;
        Ok(vec![softmax_rows_backward(y, upstream)?])
    }
}

/// Inputs: `x`, `w`, `bias`.
#[derive(Default)]
pub struct LinearOp {
    saved: Option<(Matrix, Matrix)>,
}

impl DiffOp for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn arity(&self) -> usize {
        3
    }
    fn forward(&mut self, inputs: &[&Matrix]) -> Result<Matrix> {
        check_arity(self.name(), 3, inputs)?;
        let out = linear(inputs[0], inputs[1], inputs[2])?;
        self.saved = Some((inputs[0].clone(), inputs[1].clone()));
        Ok(out)
    }
    fn backward(&self, upstream: &Matrix) -> Result<Vec<Matrix>> {
        let (x, w) = self.saved.as_ref().ok_or(Error::BackwardBeforeForward { op: "linear" })?;
        let g = linear_backward(x, w, upstream)?;
        Ok(vec![g.dx, g.dw, g.dbias])
    }
}

/// Inputs: `x`, `gamma`, `beta`.
pub struct LayerNormOp {
    pub eps: f64,
    saved: Option<(LayerNormCache, Matrix)>,
}

impl LayerNormOp {
    pub fn new(eps: f64) -> Self {
        LayerNormOp { eps, saved: None }
    }
}

impl DiffOp for LayerNormOp {
    fn name(&self) -> &'static str {
        "layer_norm"
    }
    fn arity(&self) -> usize {
        3
    }
    fn forward(&mut self, inputs: &[&Matrix]) -> Result<Matrix> {
        check_arity(self.name(), 3, inputs)?;
        let (out, cache) = layer_norm(inputs[0], inputs[1], inputs[2], self.eps)?;
        self.saved = Some((cache, inputs[1].clone()));
        Ok(out)
    }
    fn backward(&self, upstream: &Matrix) -> Result<Vec<Matrix>> {
        let (cache, gamma) = self.saved.as_ref().ok_or(Error::BackwardBeforeForward { op: "layer_norm" })?;
        let g = layer_norm_backward(cache, gamma, upstream)?;
        Ok(vec![g.dx, g.dgamma, g.dbeta])
    }
}

#[derive(Default)]
pub struct HadamardOp {
    saved: Option<(Matrix, Matrix)>,
}

impl DiffOp for HadamardOp {
    fn name(&self) -> &'static str {
        "hadamard"
    }
    fn arity(&self) -> usize {
        2
    }
    fn forward(&mut self, inputs: &[&Matrix]) -> Result<Matrix> {
        check_arity(self.name(), 2, inputs)?;
        let out = inputs[0].hadamard(inputs[1])?;
        self.saved = Some((inputs[0].clone(), inputs[1].clone()));
        Ok(out)
    }
    fn backward(&self, upstream: &Matrix) -> Result<Vec<Matrix>> {
        let (a, b) = self.saved.as_ref().ok_or(Error::BackwardBeforeForward { op: "hadamard" })?;
        Ok(vec![upstream.hadamard(b)?, upstream.hadamard(a)?])
    }
}

#[derive(Default)]
pub struct ConcatColsOp {
    split: Option<usize>,
}

impl DiffOp for ConcatColsOp {
    fn name(&self) -> &'static str {
        "concat_cols"
    }
    fn arity(&self) -> usize {
        2
    }
    fn forward(&mut self, inputs: &[&Matrix]) -> Result<Matrix> {
        check_arity(self.name(), 2, inputs)?;
        let out = inputs[0].concat_cols(inputs[1])?;
        self.split = Some(inputs[0].cols());
        Ok(out)
    }
    fn backward(&self, upstream: &Matrix) -> Result<Vec<Matrix>> {
        let at = self.split.ok_or(Error::BackwardBeforeForward { op: "concat_cols" })?;
        let (l, r) = upstream.split_cols(at)?;
        Ok(vec![l, r])
    }
}

#[derive(Default)]
pub struct SigmoidOp {
    saved: Option<Matrix>,
}

impl DiffOp for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn arity(&self) -> usize {
        1
    }
    fn forward(&mut self, inputs: &[&Matrix]) -> Result<Matrix> {
        check_arity(self.name(), 1, inputs)?;
        let y = sigmoid(inputs[0]);
        self.saved = Some(y.clone());
        Ok(y)
    }
    fn backward(&self, upstream: &Matrix) -> Result<Vec<Matrix>> {
        let y = self.saved.as_ref().ok_or(Error::BackwardBeforeForward { op: "sigmoid" })?;
        Ok(vec![sigmoid_backward(y, upstream)?])
    }
}

#[derive(Default)]
pub struct ReluOp {
    saved: Option<Matrix>,
}

impl DiffOp for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn arity(&self) -> usize {
        1
    }
    fn forward(&mut self, inputs: &[&Matrix]) -> Result<Matrix> {
        check_arity(self.name(), 1, inputs)?;
        self.saved = Some(inputs[0].clone());
        Ok(relu(inputs[0]))
    }
    fn backward(&self, upstream: &Matrix) -> Result<Vec<Matrix>> {
        let x = self.saved.as_ref().ok_or(Error::BackwardBeforeForward { op: "relu" })?;
        Ok(vec![relu_backward(x, upstream)?])
    }
}

/// Fresh instances of every registered primitive.
pub fn registered_ops() -> Vec<Box<dyn DiffOp>> {
    vec![
        Box::new(MatMulOp::default()),
        Box::new(SoftmaxRowsOp::default()),
        Box::new(LinearOp::default()),
        Box::new(LayerNormOp::new(1e-5)),
        Box::new(HadamardOp::default()),
        Box::new(ConcatColsOp::default()),
        Box::new(SigmoidOp::default()),
        Box::new(ReluOp::default()),
    ]
}
