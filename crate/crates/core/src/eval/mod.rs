//! Frame-level detection evaluation.
//!
//! Detections are ranked per class by score and greedily matched to the
//! best-overlapping still-unmatched ground truth box of the same key frame.
//! Average precision is the area under the monotone precision envelope
//! (all-point interpolation). The weighted variant scales every ground
//! truth and every detection by its frame's crowd index, the number of
//! distinct ground-truth boxes in that frame.

mod io;

pub use io::{
    read_class_filter, read_detections, read_ground_truth, write_detections, write_ground_truth, EvalReport,
};

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use crate::bbox::BBox;
use crate::error::{Error, Result};

/// Default IoU threshold for frame-mAP.
pub const DEFAULT_DELTA: f64 = 0.5;
/// Multi-threshold protocol for crowded-scene benchmarks.
pub const MULTI_DELTAS: [f64; 3] = [0.5, 0.6, 0.75];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub video_id: String,
    pub timestamp_s: i64,
    pub bbox: BBox,
    pub class_id: u32,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub video_id: String,
    pub timestamp_s: i64,
    pub bbox: BBox,
    pub class_id: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct APResult {
    pub per_class_ap: BTreeMap<u32, f64>,
    pub map_value: f64,
    /// Detections matched to a ground truth.
    pub matched: usize,
    /// Detections left unmatched (false positives).
    pub unmatched_detections: usize,
    /// Ground truths never matched.
    pub unmatched_ground_truth: usize,
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

type FrameKey<'a> = (&'a str, i64);

/// Crowd index per key frame: the number of distinct ground-truth boxes.
fn crowd_weights(gts: &[GroundTruthRecord]) -> HashMap<FrameKey<'_>, f64> {
    let mut boxes: HashMap<FrameKey<'_>, Vec<[u64; 4]>> = HashMap::new();
    for g in gts {
        let bits = g.bbox.to_array().map(f64::to_bits);
        let entry = boxes.entry((g.video_id.as_str(), g.timestamp_s)).or_default();
        if !entry.contains(&bits) {
            entry.push(bits);
        }
    }
    boxes.into_iter().map(|(k, v)| (k, v.len() as f64)).collect()
}

#[derive(Clone, Copy, Debug)]
struct ClassStats {
    ap: f64,
    tp: usize,
    fp: usize,
    n_gt: usize,
}

fn validate_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("IoU threshold must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

/// All-point interpolated AP from cumulative (recall, precision) points.
fn all_point_ap(recall: &[f64], precision: &[f64]) -> f64 {
    let mut mrec = Vec::with_capacity(recall.len() + 2);
    let mut mpre = Vec::with_capacity(recall.len() + 2);
    mrec.push(0.0);
    mpre.push(0.0);
    mrec.extend_from_slice(recall);
    mpre.extend_from_slice(precision);
    mrec.push(1.0);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    let mut ap = 0.0;
    for i in 1..mrec.len() {
        if mrec[i] != mrec[i - 1] {
            ap += (mrec[i] - mrec[i - 1]) * mpre[i];
        }
    }
    ap
}

fn class_stats(
    dets: &[DetectionRecord],
    gts: &[GroundTruthRecord],
    class_id: u32,
    delta: f64,
    weights: Option<&HashMap<FrameKey<'_>, f64>>,
) -> Option<ClassStats> {
    let weight_of = |key: &FrameKey<'_>| weights.map_or(1.0, |w| w.get(key).copied().unwrap_or(1.0));

    let mut frames: HashMap<FrameKey<'_>, Vec<(BBox, bool)>> = HashMap::new();
    let mut n_gt = 0usize;
    let mut total_weight = 0.0;
    for g in gts.iter().filter(|g| g.class_id == class_id) {
        let key = (g.video_id.as_str(), g.timestamp_s);
        total_weight += weight_of(&key);
        frames.entry(key).or_default().push((g.bbox, false));
        n_gt += 1;
    }
    if n_gt == 0 {
        return None;
    }

    let mut ranked: Vec<&DetectionRecord> = dets.iter().filter(|d| d.class_id == class_id).collect();
    // stable: equal scores keep input order
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));

    let (mut tp_w, mut fp_w) = (0.0, 0.0);
    let (mut tp, mut fp) = (0, 0);
    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    for det in ranked {
        let key = (det.video_id.as_str(), det.timestamp_s);
        let w = weight_of(&key);
        let mut best: Option<(usize, f64)> = None;
        if let Some(cands) = frames.get(&key) {
            for (i, (gt_box, used)) in cands.iter().enumerate() {
                if *used {
                    continue;
                }
                let o = det.bbox.iou(gt_box);
                if o >= delta && best.is_none_or(|(_, b)| o > b) {
                    best = Some((i, o));
                }
            }
        }
        match best {
            Some((i, _)) => {
                frames.get_mut(&key).unwrap()[i].1 = true;
                tp_w += w;
                tp += 1;
            }
            None => {
                fp_w += w;
                fp += 1;
            }
        }
        recall.push(tp_w / total_weight);
        precision.push(tp_w / (tp_w + fp_w));
    }
    Some(ClassStats {
        ap: all_point_ap(&recall, &precision),
        tp,
        fp,
        n_gt,
    })
}

/// Average precision of one class at IoU threshold `delta`. `None` when
/// the class has no ground truth.
pub fn average_precision(
    dets: &[DetectionRecord],
    gts: &[GroundTruthRecord],
    class_id: u32,
    delta: f64,
) -> Result<Option<f64>> {
    validate_delta(delta)?;
    Ok(class_stats(dets, gts, class_id, delta, None).map(|s| s.ap))
}

fn evaluate(
    dets: &[DetectionRecord],
    gts: &[GroundTruthRecord],
    delta: f64,
    class_filter: Option<&BTreeSet<u32>>,
    weighted: bool,
) -> Result<APResult> {
    validate_delta(delta)?;
    if gts.is_empty() {
        return Err(Error::InvalidArgument("no ground truth to evaluate against".into()));
    }
    let classes: Vec<u32> = gts
        .iter()
        .map(|g| g.class_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|c| class_filter.is_none_or(|f| f.contains(c)))
        .collect();
    if classes.is_empty() {
        return Err(Error::InvalidArgument(
            "no evaluated class has ground truth".into(),
        ));
    }
    let weights = weighted.then(|| crowd_weights(gts));
    let stats: Vec<(u32, ClassStats)> = classes
        .par_iter()
        .map(|&c| (c, class_stats(dets, gts, c, delta, weights.as_ref()).expect("class has ground truth")))
        .collect();

    let per_class_ap: BTreeMap<u32, f64> = stats.iter().map(|(c, s)| (*c, s.ap)).collect();
    let map_value = stats.iter().map(|(_, s)| s.ap).sum::<f64>() / stats.len() as f64;
    Ok(APResult {
        per_class_ap,
        map_value,
        matched: stats.iter().map(|(_, s)| s.tp).sum(),
        unmatched_detections: stats.iter().map(|(_, s)| s.fp).sum(),
        unmatched_ground_truth: stats.iter().map(|(_, s)| s.n_gt - s.tp).sum(),
    })
}

/// Mean AP over classes that have ground truth (and pass `class_filter`).
pub fn frame_map(
    dets: &[DetectionRecord],
    gts: &[GroundTruthRecord],
    delta: f64,
    class_filter: Option<&BTreeSet<u32>>,
) -> Result<APResult> {
    evaluate(dets, gts, delta, class_filter, false)
}

/// Crowd-weighted counterpart of [`frame_map`].
pub fn weighted_frame_map(
    dets: &[DetectionRecord],
    gts: &[GroundTruthRecord],
    delta: f64,
    class_filter: Option<&BTreeSet<u32>>,
) -> Result<APResult> {
    evaluate(dets, gts, delta, class_filter, true)
}

fn mean_over_deltas(
    dets: &[DetectionRecord],
    gts: &[GroundTruthRecord],
    deltas: &[f64],
    class_filter: Option<&BTreeSet<u32>>,
    weighted: bool,
) -> Result<f64> {
    if deltas.is_empty() {
        return Err(Error::InvalidArgument("no IoU thresholds given".into()));
    }
    let mut total = 0.0;
    for &d in deltas {
        total += evaluate(dets, gts, d, class_filter, weighted)?.map_value;
    }
    Ok(total / deltas.len() as f64)
}

/// Arithmetic mean of [`frame_map`] over `deltas`.
pub fn multi_threshold_map(
    dets: &[DetectionRecord],
    gts: &[GroundTruthRecord],
    deltas: &[f64],
    class_filter: Option<&BTreeSet<u32>>,
) -> Result<f64> {
    mean_over_deltas(dets, gts, deltas, class_filter, false)
}

/// Arithmetic mean of [`weighted_frame_map`] over `deltas`.
pub fn weighted_map(
    dets: &[DetectionRecord],
    gts: &[GroundTruthRecord],
    deltas: &[f64],
    class_filter: Option<&BTreeSet<u32>>,
) -> Result<f64> {
    mean_over_deltas(dets, gts, deltas, class_filter, true)
}
