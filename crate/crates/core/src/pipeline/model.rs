//! The full model, its per-clip loss and the two-stage SGD loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::roi::pool_actors;
use super::synth::{Clip, Dataset};
use crate::error::{Error, Result};
use crate::feature_bank::{BankRecord, FeatureBank, WindowSpec};
use crate::fusion::{bce_loss_normalised, fuse_pair, LabelSet};
use crate::long_term::{FeatureWindow, LongTermConfig, LongTermParams};
use crate::numerics::{grad_check, ops, GradReport, Matrix, ParamSet};
use crate::short_term::ShortTermParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Short-term branch only.
    One,
    /// Both branches, late fusion.
    Two,
}

impl Stage {
    pub fn number(self) -> u32 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }

    pub fn from_number(n: u32) -> Result<Stage> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(Error::Config(format!("stage must be 1 or 2, got {n}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u32,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_clips: usize,
    pub k: usize,
    pub m: usize,
    /// `0` means `d / 2`.
    pub d_k: usize,
    pub attn_scale: bool,
    pub radius_s: u64,
    pub include_center: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: 1,
            learning_rate: 0.2,
            weight_decay: 1e-4,
            steps: 1500,
            batch_clips: 4,
            k: 2,
            m: 2,
            d_k: 0,
            attn_scale: true,
            radius_s: 1,
            include_center: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<Stage> {
        let stage = Stage::from_number(self.stage)?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_clips == 0 {
            return bad("batch_clips must be >= 1".into());
        }
        if self.k == 0 || self.m == 0 {
            return bad(format!("K and M must be >= 1, got K={} M={}", self.k, self.m));
        }
        Ok(stage)
    }

    pub fn long_term(&self, d: usize) -> LongTermConfig {
        let d_k = if self.d_k == 0 { (d / 2).max(1) } else { self.d_k };
        LongTermConfig { k: self.k, m: self.m, d_k }
    }

    pub fn window(&self) -> WindowSpec {
        WindowSpec {
            radius_s: self.radius_s,
            include_center: self.include_center,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub stage: Stage,
    pub short: ShortTermParams,
    pub long: LongTermParams,
    /// Decision threshold on fused probabilities.
    pub threshold: f64,
    pub window: WindowSpec,
}

impl ModelState {
    /// Freshly initialised stage-1 model.
    pub fn new(d: usize, classes: usize, cfg: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let short = ShortTermParams::new(d, classes, cfg.attn_scale, &mut rng);
        let long = LongTermParams::new(d, classes, cfg.long_term(d), &mut rng)?;
        Ok(ModelState {
            stage: Stage::One,
            short,
            long,
            threshold: 0.5,
            window: cfg.window(),
        })
    }

    /// Stage-2 starting point: the stage-1 short-term branch, a fresh
    /// long-term branch whose output head is zero so the fused scores at
    /// step 0 equal the stage-1 scores.
    pub fn for_stage_two(stage_one: &ModelState, cfg: &TrainConfig) -> Result<Self> {
        let (d, c) = (stage_one.d(), stage_one.classes());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5354_4147_4532);
        let mut long = LongTermParams::new(d, c, cfg.long_term(d), &mut rng)?;
        long.head.w.value.fill(0.0);
        Ok(ModelState {
            stage: Stage::Two,
            short: stage_one.short.clone(),
            long,
            threshold: stage_one.threshold,
            window: cfg.window(),
        })
    }

    pub fn d(&self) -> usize {
        self.short.d()
    }

    pub fn classes(&self) -> usize {
        self.short.classes()
    }

    /// Short-term parameters followed by long-term ones.
    pub fn named_params(&self) -> Vec<(String, &crate::numerics::Param)> {
        let mut out = Vec::new();
        self.short.collect("short", &mut out);
        self.long.collect("long", &mut out);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut crate::numerics::Param)> {
        let mut out = Vec::new();
        self.short.collect_mut("short", &mut out);
        self.long.collect_mut("long", &mut out);
        out
    }

    pub fn values(&self) -> Vec<Matrix> {
        self.named_params().into_iter().map(|(_, p)| p.value.clone()).collect()
    }

    pub fn set_values(&mut self, values: &[Matrix]) -> Result<()> {
        let mut params = self.named_params_mut();
        if params.len() != values.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter blocks, got {}",
                params.len(),
                values.len()
            )));
        }
        for ((name, p), v) in params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    p.value.shape(),
                    v.shape()
                )));
            }
            p.value = v.clone();
        }
        Ok(())
    }

    fn zero_grad(&mut self) {
        self.short.zero_grad();
        self.long.zero_grad();
    }

    fn check_clip(&self, clip: &Clip) -> Result<()> {
        if clip.features.d() != self.d() {
            return Err(Error::dim("model vs clip features", (0, self.d()), (0, clip.features.d())));
        }
        if clip.labels.cols() != self.classes() && clip.labels.rows() > 0 {
            return Err(Error::dim("model vs clip labels", (0, self.classes()), clip.labels.shape()));
        }
        Ok(())
    }

    /// Class logits for one clip (`Z_s`, or `Z_s + Z_l` in stage 2).
    pub fn logits(&self, clip: &Clip, bank: Option<&FeatureBank>) -> Result<Matrix> {
        self.check_clip(clip)?;
        let actors = pool_actors(&clip.features, &clip.boxes)?;
        let (z_s, _) = self.short.forward(&clip.features, actors.features())?;
        if self.stage == Stage::One {
            return Ok(z_s);
        }
        let window = self.window_for(clip, bank)?;
        let (z_l, _) = self.long.forward(actors.features(), &window)?;
        z_s.add(&z_l)
    }

    /// Fused class probabilities for one clip.
    pub fn probabilities(&self, clip: &Clip, bank: Option<&FeatureBank>) -> Result<Matrix> {
        Ok(ops::sigmoid(&self.logits(clip, bank)?))
    }

    pub fn window_for(&self, clip: &Clip, bank: Option<&FeatureBank>) -> Result<FeatureWindow> {
        match bank {
            Some(b) if b.dim() != self.d() => Err(Error::dim("bank vs model", (0, b.dim()), (0, self.d()))),
            Some(b) => Ok(b.query_window(&clip.video_id, clip.timestamp_s, self.window)),
            None => Ok(FeatureWindow::empty(self.d())),
        }
    }

    /// Loss contribution of one clip, normalised by `denom` cells, with
    /// gradients accumulated into the parameters.
    fn clip_loss_and_grad(&mut self, clip: &Clip, bank: Option<&FeatureBank>, denom: usize) -> Result<f64> {
        self.check_clip(clip)?;
        if clip.boxes.is_empty() {
            return Ok(0.0);
        }
        let actors = pool_actors(&clip.features, &clip.boxes)?;
        let v = actors.features();
        let labels = LabelSet::new(clip.labels.clone())?;
        let (z_s, s_cache) = self.short.forward(&clip.features, v)?;
        match self.stage {
            Stage::One => {
                let out = bce_loss_normalised(&ops::sigmoid(&z_s), &labels, denom)?;
                self.short.backward(&s_cache, &out.dlogits)?;
                Ok(out.loss)
            }
            Stage::Two => {
                let window = self.window_for(clip, bank)?;
                let (z_l, l_cache) = self.long.forward(v, &window)?;
                let out = bce_loss_normalised(&fuse_pair(&z_s, &z_l)?, &labels, denom)?;
                self.short.backward(&s_cache, &out.dlogits)?;
                self.long.backward(&l_cache, &out.dlogits)?;
                Ok(out.loss)
            }
        }
    }

    /// Mean BCE over every (actor, class) cell of `clips`; no gradients.
    pub fn loss(&self, clips: &[Clip], bank: Option<&FeatureBank>) -> Result<f64> {
        let denom: usize = clips.iter().map(|c| c.labels.len()).sum();
        let mut total = 0.0;
        for clip in clips.iter().filter(|c| !c.boxes.is_empty()) {
            let probs = self.probabilities(clip, bank)?;
            total += bce_loss_normalised(&probs, &LabelSet::new(clip.labels.clone())?, denom)?.loss;
        }
        Ok(total)
    }

    /// Batch loss and zeroed-then-accumulated gradients, in parameter order.
    pub fn loss_and_grads(&mut self, clips: &[Clip], bank: Option<&FeatureBank>) -> Result<(f64, Vec<Matrix>)> {
        self.zero_grad();
        let denom: usize = clips.iter().map(|c| c.labels.len()).sum();
        let mut total = 0.0;
        for clip in clips {
            total += self.clip_loss_and_grad(clip, bank, denom)?;
        }
        let grads = self.named_params().into_iter().map(|(_, p)| p.grad.clone()).collect();
        Ok((total, grads))
    }

    fn active_param_count(&self) -> usize {
        match self.stage {
            Stage::One => self.short.named_params().len(),
            Stage::Two => self.named_params().len(),
        }
    }

    /// Central-difference check of the batch loss against the analytic
    /// gradient, over every parameter the current stage trains.
    pub fn grad_check(&self, clips: &[Clip], bank: Option<&FeatureBank>, eps: f64) -> Result<GradReport> {
        let mut work = self.clone();
        let (_, grads) = work.loss_and_grads(clips, bank)?;
        let n = self.active_param_count();
        let named: Vec<(String, Matrix)> = self
            .named_params()
            .into_iter()
            .take(n)
            .map(|(name, p)| (name, p.value.clone()))
            .collect();
        let tail: Vec<Matrix> = self.values().split_off(n);
        let mut probe = self.clone();
        grad_check(
            &format!("stage-{} loss", self.stage.number()),
            &named,
            &grads[..n],
            eps,
            |vals| {
                let all: Vec<Matrix> = vals.iter().cloned().chain(tail.iter().cloned()).collect();
                probe.set_values(&all).expect("same shapes");
                probe.loss(clips, bank).unwrap_or(f64::NAN)
            },
        )
    }
}

/// Output of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelState,
    /// Batch loss before each update.
    pub loss_curve: Vec<f64>,
    /// Stage 1 fills a bank with the ROI features of every training clip.
    pub bank: Option<FeatureBank>,
}

/// ROI-pooled actor features of every clip, keyed by video and timestamp.
pub fn build_bank(dataset: &Dataset) -> Result<FeatureBank> {
    let mut bank = FeatureBank::new(dataset.d());
    for clip in &dataset.clips {
        let actors = pool_actors(&clip.features, &clip.boxes)?;
        bank.insert(BankRecord {
            video_id: clip.video_id.clone(),
            timestamp_s: clip.timestamp_s,
            feats: actors.features().clone(),
        })?;
    }
    Ok(bank)
}

/// Plain SGD with weight decay, `p -= lr * (g + wd * p)`.
///
/// Stage 1 starts from `init` if given (else a fresh model), trains the
/// short-term branch and returns a bank. Stage 2 requires `init` (a
/// stage-1 model) and a bank, which stays frozen.
pub fn train(
    dataset: &Dataset,
    cfg: &TrainConfig,
    init: Option<&ModelState>,
    bank: Option<&FeatureBank>,
) -> Result<TrainOutcome> {
    let stage = cfg.validate()?;
    if dataset.clips.is_empty() {
        return Err(Error::Config("training set has no clips".into()));
    }
    let mut model = match (stage, init) {
        (Stage::One, Some(m)) => m.clone(),
        (Stage::One, None) => ModelState::new(dataset.d(), dataset.classes(), cfg)?,
        (Stage::Two, Some(m)) => ModelState::for_stage_two(m, cfg)?,
        (Stage::Two, None) => return Err(Error::Config("stage 2 needs a stage-1 model to start from".into())),
    };
    if stage == Stage::Two && bank.is_none() {
        return Err(Error::Config("stage 2 needs the stage-1 feature bank".into()));
    }
    if model.d() != dataset.d() || model.classes() != dataset.classes() {
        return Err(Error::Config(format!(
            "model is d={} c={}, dataset is d={} c={}",
            model.d(),
            model.classes(),
            dataset.d(),
            dataset.classes()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..dataset.clips.len()).collect();
    let mut cursor = order.len();
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    let batch = cfg.batch_clips.min(order.len());
    let mut idx = Vec::with_capacity(batch);
    for step in 0..cfg.steps {
        idx.clear();
        while idx.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        // fixed summation order within a batch
        idx.sort_unstable();
        let picked: Vec<Clip> = idx.iter().map(|&i| dataset.clips[i].clone()).collect();
        let loss = match model.loss_and_grads(&picked, bank) {
            Ok((loss, _)) => loss,
            Err(Error::NonFinite(_)) => f64::NAN,
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        loss_curve.push(loss);
        sgd_step(&mut model, cfg.learning_rate, cfg.weight_decay);
    }

    let bank = match stage {
        Stage::One => Some(build_bank(dataset)?),
        Stage::Two => None,
    };
    Ok(TrainOutcome { model, loss_curve, bank })
}

fn sgd_step(model: &mut ModelState, lr: f64, wd: f64) {
    if lr == 0.0 {
        return;
    }
    let n = model.active_param_count();
    for (_, p) in model.named_params_mut().into_iter().take(n) {
        for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
            *v -= lr * (g + wd * *v);
        }
    }
}
