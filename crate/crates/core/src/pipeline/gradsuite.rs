//! Finite-difference checks of every hand-written backward pass.
//!
//! Each case contracts the op output with a fixed random upstream matrix
//! `R`, so the scalar loss is `sum(out ⊙ R)` and the analytic gradient is
//! the op's vector-Jacobian product at `R`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{ModelState, Stage, TrainConfig};
use super::synth::Clip;
use crate::bbox::BBox;
use crate::error::Result;
use crate::feature_bank::{BankRecord, FeatureBank, WindowSpec};
use crate::fusion::{bce_loss, fuse_pair, LabelSet};
use crate::long_term::{FeatureWindow, LongTermConfig, LongTermParams, NLBlockParams, ReaderUnitParams, SecondOrderHead};
use crate::numerics::{grad_check, registered_ops, Dense, Ffn, GradReport, LayerNorm, Matrix, ParamSet};
use crate::short_term::{ClipFeatureMap, ShortTermParams};

/// Step and tolerance used throughout the suite.
pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-5;

fn contract(out: &Matrix, r: &Matrix) -> f64 {
    out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn op_inputs(name: &str, rng: &mut ChaCha8Rng) -> Vec<Matrix> {
    let n = |r, c, rng: &mut ChaCha8Rng| Matrix::random_normal(r, c, 1.0, rng);
    match name {
        "matmul" => vec![n(3, 4, rng), n(4, 2, rng)],
        "linear" => vec![n(3, 4, rng), n(4, 2, rng), n(1, 2, rng)],
        "layer_norm" => vec![n(3, 5, rng), n(1, 5, rng), n(1, 5, rng)],
        "hadamard" => vec![n(3, 4, rng), n(3, 4, rng)],
        "concat_cols" => vec![n(3, 2, rng), n(3, 3, rng)],
        _ => vec![n(3, 5, rng)],
    }
}

/// One report per registered primitive.
pub fn check_registered_ops(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for mut op in registered_ops() {
        let name = op.name();
        let inputs = op_inputs(name, &mut rng);
        let refs: Vec<&Matrix> = inputs.iter().collect();
        let out = op.forward(&refs)?;
        let r = Matrix::random_normal(out.rows(), out.cols(), 1.0, &mut rng);
        let analytic = op.backward(&r)?;
        let named: Vec<(String, Matrix)> = inputs
            .iter()
            .enumerate()
            .map(|(i, m)| (format!("input{i}"), m.clone()))
            .collect();
        let mut probe = registered_ops().into_iter().find(|o| o.name() == name).expect("registered");
        reports.push(grad_check(name, &named, &analytic, GRAD_EPS, |vals| {
            let refs: Vec<&Matrix> = vals.iter().collect();
            probe.forward(&refs).map(|o| contract(&o, &r)).unwrap_or(f64::NAN)
        })?);
    }
    Ok(reports)
}

/// Checks every parameter of `params` plus the module input.
fn module_case<P, F, B>(name: &str, params: &P, input: &Matrix, rng: &mut ChaCha8Rng, fwd: F, fwd_bwd: B) -> Result<GradReport>
where
    P: ParamSet + Clone,
    F: Fn(&P, &Matrix) -> Result<Matrix>,
    B: Fn(&mut P, &Matrix, &Matrix) -> Result<Matrix>,
{
    let out = fwd(params, input)?;
    let r = Matrix::random_normal(out.rows(), out.cols(), 1.0, rng);
    let mut work = params.clone();
    work.zero_grad();
    let dx = fwd_bwd(&mut work, input, &r)?;
    let mut analytic = work.grads();
    analytic.push(dx);
    let mut named: Vec<(String, Matrix)> = params
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, p.value.clone()))
        .collect();
    named.push(("input".into(), input.clone()));
    let n = named.len() - 1;
    let mut probe = params.clone();
    grad_check(name, &named, &analytic, GRAD_EPS, |vals| {
        probe.set_values(&vals[..n]).expect("same shapes");
        fwd(&probe, &vals[n]).map(|o| contract(&o, &r)).unwrap_or(f64::NAN)
    })
}

/// Layers, both branches, every long-term building block and the fused
/// loss, on random inputs.
pub fn check_modules(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(17));
    let (d, d_k, c, n, l) = (6, 3, 4, 2, 3);
    let mut reports = Vec::new();
    let q = Matrix::random_normal(n, d, 1.0, &mut rng);
    let ctx = Matrix::random_normal(l, d, 1.0, &mut rng);

    let dense = Dense::new(d, c, &mut rng);
    reports.push(module_case("dense", &dense, &q, &mut rng, |p, x| p.forward(x), |p, x, r| p.backward(x, r))?);

    let ffn = Ffn::new(d, d, c, &mut rng);
    reports.push(module_case(
        "ffn",
        &ffn,
        &q,
        &mut rng,
        |p, x| Ok(p.forward(x)?.0),
        |p, x, r| {
            let (_, cache) = p.forward(x)?;
            p.backward(&cache, r)
        },
    )?);

    let mut ln = LayerNorm::new(d);
    ln.gamma.value = Matrix::random_normal(1, d, 1.0, &mut rng);
    ln.beta.value = Matrix::random_normal(1, d, 1.0, &mut rng);
    reports.push(module_case(
        "layer_norm_module",
        &ln,
        &q,
        &mut rng,
        |p, x| Ok(p.forward(x)?.0),
        |p, x, r| {
            let (_, cache) = p.forward(x)?;
            p.backward(&cache, r)
        },
    )?);

    let clip = ClipFeatureMap::new(2, 2, 2, Matrix::random_normal(8, d, 1.0, &mut rng))?;
    let short = ShortTermParams::new(d, c, true, &mut rng);
    reports.push(module_case(
        "short_term",
        &short,
        &q,
        &mut rng,
        |p, x| Ok(p.forward(&clip, x)?.0),
        |p, x, r| {
            let (_, cache) = p.forward(&clip, x)?;
            p.backward(&cache, r)
        },
    )?);

    let nl = NLBlockParams::new(d, d_k, &mut rng);
    reports.push(module_case(
        "nonlocal",
        &nl,
        &q,
        &mut rng,
        |p, x| Ok(p.forward(x, &ctx)?.0),
        |p, x, r| {
            let (_, cache) = p.forward(x, &ctx)?;
            p.backward(&cache, r)
        },
    )?);

    let so = SecondOrderHead::new(d, d_k, &mut rng);
    reports.push(module_case(
        "second_order",
        &so,
        &q,
        &mut rng,
        |p, x| Ok(p.forward(x, &ctx)?.0),
        |p, x, r| {
            let (_, cache) = p.forward(x, &ctx)?;
            p.backward(&cache, r)
        },
    )?);

    let mut unit = ReaderUnitParams::new(d, d_k, 2, &mut rng)?;
    unit.beta.value = Matrix::random_normal(1, 2, 1.0, &mut rng);
    reports.push(module_case(
        "reader_unit",
        &unit,
        &q,
        &mut rng,
        |p, x| Ok(p.forward(x, &ctx)?.0),
        |p, x, r| {
            let (_, cache) = p.forward(x, &ctx)?;
            p.backward(&cache, r)
        },
    )?);

    let window = FeatureWindow::new(ctx.clone(), vec![0; l])?;
    let long = LongTermParams::new(d, c, LongTermConfig { k: 2, m: 2, d_k }, &mut rng)?;
    reports.push(module_case(
        "long_term",
        &long,
        &q,
        &mut rng,
        |p, x| Ok(p.forward(x, &window)?.0),
        |p, x, r| {
            let (_, cache) = p.forward(x, &window)?;
            p.backward(&cache, r)
        },
    )?);

    let z_s = Matrix::random_normal(n, c, 1.0, &mut rng);
    let z_l = Matrix::random_normal(n, c, 1.0, &mut rng);
    let y = Matrix::random_uniform(n, c, 1.0, &mut rng).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let labels = LabelSet::new(y)?;
    let g = bce_loss(&fuse_pair(&z_s, &z_l)?, &labels)?.dlogits;
    reports.push(grad_check(
        "bce_fuse",
        &[("z_s".into(), z_s), ("z_l".into(), z_l)],
        &[g.clone(), g],
        GRAD_EPS,
        |v| {
            fuse_pair(&v[0], &v[1])
                .and_then(|p| bce_loss(&p, &labels))
                .map(|o| o.loss)
                .unwrap_or(f64::NAN)
        },
    )?);
    Ok(reports)
}

/// A one-clip instance with `N = 2` actors on a `2x2x2` grid, `d = 6`,
/// `c = 4`, and a bank window of `L = 3` rows.
pub fn small_instance(seed: u64) -> Result<(Clip, FeatureBank)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, c) = (6, 4);
    let features = ClipFeatureMap::new(2, 2, 2, Matrix::random_normal(8, d, 1.0, &mut rng))?;
    let boxes = vec![BBox::new(0.0, 0.0, 0.5, 1.0)?, BBox::new(0.5, 0.0, 1.0, 1.0)?];
    let labels = Matrix::random_uniform(2, c, 1.0, &mut rng).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let clip = Clip {
        video_id: "v".into(),
        timestamp_s: 1,
        features,
        boxes,
        identities: vec![0, 1],
        labels,
    };
    let mut bank = FeatureBank::new(d);
    bank.insert(BankRecord {
        video_id: "v".into(),
        timestamp_s: 0,
        feats: Matrix::random_normal(3, d, 1.0, &mut rng),
    })?;
    Ok((clip, bank))
}

/// Stage-2 model (`K = M = 2`) with every block randomised, including the
/// long-term output head.
pub fn small_model(seed: u64) -> Result<ModelState> {
    let cfg = TrainConfig {
        stage: 2,
        seed,
        k: 2,
        m: 2,
        d_k: 3,
        radius_s: 1,
        ..TrainConfig::default()
    };
    let mut model = ModelState::new(6, 4, &cfg)?;
    model.stage = Stage::Two;
    model.window = WindowSpec { radius_s: 1, include_center: false };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    for unit in &mut model.long.units {
        unit.beta.value = Matrix::random_normal(1, 2, 1.0, &mut rng);
    }
    Ok(model)
}

/// Gradient of the full stage-2 loss on [`small_instance`].
pub fn check_stage_two_loss(seed: u64) -> Result<GradReport> {
    let (clip, bank) = small_instance(seed)?;
    let model = small_model(seed)?;
    debug_assert_eq!(model.window_for(&clip, Some(&bank))?.len(), 3);
    model.grad_check(std::slice::from_ref(&clip), Some(&bank), GRAD_EPS)
}

/// Everything above for one seed.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut all = check_registered_ops(seed)?;
    all.extend(check_modules(seed)?);
    all.push(check_stage_two_loss(seed)?);
    Ok(all)
}
