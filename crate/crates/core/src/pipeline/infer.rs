use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{train, ModelState, Stage, TrainConfig};
use super::roi::pool_actors;
use super::synth::{Clip, Dataset};
use crate::error::{Error, Result};
use crate::eval::{frame_map, DetectionRecord, DEFAULT_DELTA};
use crate::feature_bank::{FeatureBank, WindowSpec};
use crate::fusion::fuse_pair;
use crate::numerics::ops::sigmoid;

/// Scores every (actor, class) pair of one clip. A stage-1 model uses the
/// short-term branch alone; a stage-2 model adds the long-term branch over
/// the bank window around the clip.
pub fn infer(
    model: &ModelState,
    clip: &Clip,
    bank: Option<&FeatureBank>,
    window: WindowSpec,
) -> Result<Vec<DetectionRecord>> {
    if clip.features.d() != model.d() {
        return Err(Error::dim("infer", (0, model.d()), (0, clip.features.d())));
    }
    if clip.boxes.is_empty() {
        return Ok(Vec::new());
    }
    let actors = pool_actors(&clip.features, &clip.boxes)?;
    let (z_s, _) = model.short.forward(&clip.features, actors.features())?;
    let probs = match model.stage {
        Stage::One => sigmoid(&z_s),
        Stage::Two => {
            let ctx = match bank {
                Some(b) if b.dim() != model.d() => {
                    return Err(Error::dim("infer(bank)", (0, b.dim()), (0, model.d())));
                }
                Some(b) => b.query_window(&clip.video_id, clip.timestamp_s, window),
                None => crate::long_term::FeatureWindow::empty(model.d()),
            };
            let (z_l, _) = model.long.forward(actors.features(), &ctx)?;
            fuse_pair(&z_s, &z_l)?
        }
    };
    if !probs.is_finite() {
        return Err(Error::NonFinite(format!("scores for {} t={}", clip.video_id, clip.timestamp_s)));
    }
    let mut out = Vec::with_capacity(probs.len());
    for (a, bbox) in clip.boxes.iter().enumerate() {
        for k in 0..probs.cols() {
            out.push(DetectionRecord {
                video_id: clip.video_id.clone(),
                timestamp_s: clip.timestamp_s,
                bbox: *bbox,
                class_id: k as u32,
                score: probs.get(a, k),
            });
        }
    }
    Ok(out)
}

/// [`infer`] over every clip, in parallel, concatenated in clip order.
pub fn infer_dataset(model: &ModelState, dataset: &Dataset, bank: Option<&FeatureBank>) -> Result<Vec<DetectionRecord>> {
    let parts: Vec<Vec<DetectionRecord>> = dataset
        .clips
        .par_iter()
        .map(|c| infer(model, c, bank, model.window))
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// frame-mAP@0.5 of `model` on `dataset`, restricted to `classes` if given.
pub fn evaluate_model(
    model: &ModelState,
    dataset: &Dataset,
    bank: Option<&FeatureBank>,
    classes: Option<&BTreeSet<u32>>,
) -> Result<f64> {
    let dets = infer_dataset(model, dataset, bank)?;
    Ok(frame_map(&dets, &dataset.ground_truth(), DEFAULT_DELTA, classes)?.map_value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub m: usize,
    pub metric: f64,
}

/// Trains one stage-2 model per `(K, M)` cell from the same stage-1 model
/// and seed, and scores each on `test` by frame-mAP@0.5 over the long-term
/// classes (all classes if there are none).
pub fn sweep_km(
    train_set: &Dataset,
    test_set: &Dataset,
    stage_one: &ModelState,
    bank: &FeatureBank,
    base: &TrainConfig,
    k_values: &[usize],
    m_values: &[usize],
) -> Result<Vec<SweepRow>> {
    if k_values.is_empty() || m_values.is_empty() {
        return Err(Error::Config("sweep needs at least one K and one M".into()));
    }
    if let Some(bad) = k_values.iter().chain(m_values).find(|&&v| v == 0) {
        return Err(Error::Config(format!("K and M values must be >= 1, got {bad}")));
    }
    let lt = test_set.long_term_classes();
    let classes = (!lt.is_empty()).then_some(&lt);
    let cells: Vec<(usize, usize)> = k_values
        .iter()
        .flat_map(|&k| m_values.iter().map(move |&m| (k, m)))
        .collect();
    cells
        .par_iter()
        .map(|&(k, m)| {
            let cfg = TrainConfig { stage: 2, k, m, ..base.clone() };
            let out = train(train_set, &cfg, Some(stage_one), Some(bank))?;
            let metric = evaluate_model(&out.model, test_set, Some(bank), classes)?;
            Ok(SweepRow { k, m, metric })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::model::build_bank;
    use crate::pipeline::synth::{synth_generate, SynthConfig};

    fn data() -> Dataset {
        synth_generate(&SynthConfig {
            n_videos: 3,
            clips_per_video: 3,
            grid: [2, 2, 2],
            d: 6,
            c_local: 1,
            c_longterm: 1,
            seed: 3,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn stage_two(ds: &Dataset) -> (ModelState, FeatureBank) {
        let cfg = TrainConfig { steps: 3, ..TrainConfig::default() };
        let s1 = train(ds, &cfg, None, None).unwrap();
        let cfg = TrainConfig { stage: 2, ..cfg };
        let s2 = train(ds, &cfg, Some(&s1.model), s1.bank.as_ref()).unwrap();
        (s2.model, s1.bank.unwrap())
    }

    #[test]
    fn one_record_per_actor_and_class() {
        let ds = data();
        let (model, bank) = stage_two(&ds);
        let clip = &ds.clips[4];
        let recs = infer(&model, clip, Some(&bank), model.window).unwrap();
        assert_eq!(recs.len(), clip.boxes.len() * 2);
        assert!(recs.iter().all(|r| (0.0..=1.0).contains(&r.score)));
    }

    #[test]
    fn empty_window_and_no_actors() {
        let ds = data();
        let (model, _) = stage_two(&ds);
        let empty = FeatureBank::new(6);
        let recs = infer(&model, &ds.clips[0], Some(&empty), model.window).unwrap();
        assert!(recs.iter().all(|r| r.score.is_finite()));
        let mut clip = ds.clips[0].clone();
        clip.boxes.clear();
        assert!(infer(&model, &clip, Some(&empty), model.window).unwrap().is_empty());
    }

    #[test]
    fn dim_mismatch() {
        let ds = data();
        let (model, _) = stage_two(&ds);
        assert!(infer(&model, &ds.clips[0], Some(&FeatureBank::new(5)), model.window).is_err());
        let mut clip = ds.clips[0].clone();
        clip.features = crate::short_term::ClipFeatureMap::new(1, 1, 1, crate::numerics::Matrix::zeros(1, 4)).unwrap();
        assert!(matches!(infer(&model, &clip, None, model.window), Err(Error::Dimension { .. })));
    }

    #[test]
    fn deterministic_csv() {
        let ds = data();
        let (model, bank) = stage_two(&ds);
        let csv = |_: ()| {
            let mut buf = Vec::new();
            crate::eval::write_detections(&mut buf, &infer_dataset(&model, &ds, Some(&bank)).unwrap()).unwrap();
            buf
        };
        assert_eq!(csv(()), csv(()));
    }

    #[test]
    fn sweep_shape_and_repeatability() {
        let ds = data();
        let (tr, te) = ds.split_videos(2);
        let cfg = TrainConfig { steps: 3, ..TrainConfig::default() };
        let s1 = train(&tr, &cfg, None, None).unwrap();
        let bank = build_bank(&ds).unwrap();
        let a = sweep_km(&tr, &te, &s1.model, &bank, &cfg, &[1, 2], &[1, 2]).unwrap();
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|r| r.metric.is_finite()));
        let b = sweep_km(&tr, &te, &s1.model, &bank, &cfg, &[1, 2], &[1, 2]).unwrap();
        assert_eq!(a, b);
        assert!(sweep_km(&tr, &te, &s1.model, &bank, &cfg, &[0], &[1]).is_err());
    }
}
