//! Frame-level AP on a tiny hand-built case, then the multi-threshold and
//! crowd-weighted variants.
//!
//! cargo run --example frame_map_eval

use lstc::eval::{frame_map, multi_threshold_map, weighted_frame_map, BBox, DetectionRecord, GroundTruthRecord, MULTI_DELTAS};

fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

fn main() -> lstc::Result<()> {
    let gt = |t, bbox, class_id| GroundTruthRecord { video_id: "v".into(), timestamp_s: t, bbox, class_id };
    let det = |t, bbox, class_id, score| DetectionRecord { video_id: "v".into(), timestamp_s: t, bbox, class_id, score };
    let (a, bb, c) = (b(0.0, 0.0, 0.5, 0.5), b(0.5, 0.5, 1.0, 1.0), b(0.0, 0.5, 0.5, 1.0));

    // frame 0 has three people, frame 1 has two
    let gts = vec![gt(0, a, 0), gt(1, bb, 0), gt(0, bb, 1), gt(0, c, 2), gt(1, a, 2)];
    let dets = vec![
        det(0, a, 0, 0.9),
        det(1, c, 0, 0.8),
        det(1, bb, 0, 0.7),
        det(0, bb, 1, 0.6),
        det(0, a, 2, 0.95),
        // slightly off the truth: IoU 0.64
        det(1, b(0.0, 0.0, 0.4, 0.4), 2, 0.5),
    ];

    let r = frame_map(&dets, &gts, 0.5, None)?;
    for (class, ap) in &r.per_class_ap {
        println!("class {class}: AP@0.5 {ap:.4}");
    }
    println!(
        "mAP@0.5 {:.4}  matched {}  false positives {}  missed {}",
        r.map_value, r.matched, r.unmatched_detections, r.unmatched_ground_truth
    );
    for delta in MULTI_DELTAS {
        println!("mAP@{delta} {:.4}", frame_map(&dets, &gts, delta, None)?.map_value);
    }
    println!("mean over {:?}: {:.4}", MULTI_DELTAS, multi_threshold_map(&dets, &gts, &MULTI_DELTAS, None)?);
    println!("crowd-weighted mAP@0.5 {:.4}", weighted_frame_map(&dets, &gts, 0.5, None)?.map_value);
    Ok(())
}
