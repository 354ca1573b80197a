use crate::bbox::BBox;
use crate::numerics::Matrix;
use crate::short_term::{ActorSet, ClipFeatureMap};
use crate::error::Result;

/// Temporal average map plus temporal max map, each averaged over the grid
/// cells whose centres fall inside `bbox` (the nearest cell if none do).
pub fn roi_pool(x: &ClipFeatureMap, bbox: &BBox) -> Matrix {
    let (h, w, t) = x.dims();
    let d = x.d();
    let cells = cells_in_box(h, w, bbox);
    let mut out = vec![0.0; d];
    let mut avg = vec![0.0; d];
    let mut max = vec![0.0; d];
    for &(hi, wi) in &cells {
        avg.iter_mut().for_each(|v| *v = 0.0);
        max.copy_from_slice(x.cell(0, hi, wi));
        for ti in 0..t {
            for (k, &v) in x.cell(ti, hi, wi).iter().enumerate() {
                avg[k] += v;
                if v > max[k] {
                    max[k] = v;
                }
            }
        }
        for k in 0..d {
            out[k] += avg[k] / t as f64 + max[k];
        }
    }
    let n = cells.len() as f64;
    Matrix::row_vector(&out.iter().map(|v| v / n).collect::<Vec<_>>())
}

/// Grid cells `(h, w)` whose centres lie inside the box, row-major.
pub fn cells_in_box(h: usize, w: usize, bbox: &BBox) -> Vec<(usize, usize)> {
    let mut inside = Vec::new();
    for hi in 0..h {
        for wi in 0..w {
            let (cx, cy) = cell_center(h, w, hi, wi);
            if bbox.contains(cx, cy) {
                inside.push((hi, wi));
            }
        }
    }
    if inside.is_empty() {
        let (bx, by) = bbox.center();
        let mut best = (0, 0);
        let mut best_d = f64::INFINITY;
        for hi in 0..h {
            for wi in 0..w {
                let (cx, cy) = cell_center(h, w, hi, wi);
                let dist = (cx - bx).powi(2) + (cy - by).powi(2);
                if dist < best_d {
                    best_d = dist;
                    best = (hi, wi);
                }
            }
        }
        inside.push(best);
    }
    inside
}

fn cell_center(h: usize, w: usize, hi: usize, wi: usize) -> (f64, f64) {
    ((wi as f64 + 0.5) / w as f64, (hi as f64 + 0.5) / h as f64)
}

/// Pools every box and packs the result as an [`ActorSet`].
pub fn pool_actors(x: &ClipFeatureMap, boxes: &[BBox]) -> Result<ActorSet> {
    let rows: Vec<Matrix> = boxes.iter().map(|b| roi_pool(x, b)).collect();
    let refs: Vec<&Matrix> = rows.iter().collect();
    ActorSet::new(Matrix::vstack(&refs, x.d())?, boxes.to_vec())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn clip(h: usize, w: usize, t: usize, d: usize, seed: u64) -> ClipFeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ClipFeatureMap::new(h, w, t, Matrix::random_normal(h * w * t, d, 1.0, &mut rng)).unwrap()
    }

    fn naive(x: &ClipFeatureMap, b: &BBox) -> Vec<f64> {
        let (h, w, t) = x.dims();
        let mut acc = vec![0.0; x.d()];
        let mut n = 0.0;
        for hi in 0..h {
            for wi in 0..w {
                let cx = (wi as f64 + 0.5) / w as f64;
                let cy = (hi as f64 + 0.5) / h as f64;
                if !(b.x1() <= cx && cx <= b.x2() && b.y1() <= cy && cy <= b.y2()) {
                    continue;
                }
                n += 1.0;
                for k in 0..x.d() {
                    let vals: Vec<f64> = (0..t).map(|ti| x.features().get((ti * h + hi) * w + wi, k)).collect();
                    let mean = vals.iter().sum::<f64>() / t as f64;
                    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    acc[k] += mean + max;
                }
            }
        }
        acc.iter().map(|v| v / n).collect()
    }

    #[test]
    fn single_frame_doubles_spatial_mean() {
        let x = clip(2, 2, 1, 3, 1);
        let b = BBox::new(0.0, 0.0, 1.0, 0.5).unwrap();
        let out = roi_pool(&x, &b);
        for k in 0..3 {
            let mean = (x.cell(0, 0, 0)[k] + x.cell(0, 0, 1)[k]) / 2.0;
            assert!((out.get(0, k) - 2.0 * mean).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_map() {
        let x = ClipFeatureMap::new(3, 3, 2, Matrix::filled(18, 4, 1.5)).unwrap();
        for b in [BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), BBox::new(0.4, 0.4, 0.45, 0.45).unwrap()] {
            assert!(roi_pool(&x, &b).data().iter().all(|&v| v == 3.0));
        }
    }

    #[test]
    fn matches_cell_scan() {
        let x = clip(3, 3, 2, 5, 7);
        let b = BBox::new(0.0, 0.0, 0.6, 0.6).unwrap();
        assert_eq!(cells_in_box(3, 3, &b).len(), 4);
        let out = roi_pool(&x, &b);
        for (k, v) in naive(&x, &b).iter().enumerate() {
            assert!((out.get(0, k) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_box_uses_nearest_cell() {
        let b = BBox::new(0.9, 0.05, 0.95, 0.1).unwrap();
        assert_eq!(cells_in_box(4, 4, &b), vec![(0, 3)]);
    }

    #[test]
    fn scales_linearly() {
        let x = clip(4, 4, 3, 6, 3);
        let b = BBox::new(0.2, 0.1, 0.9, 0.7).unwrap();
        let base = roi_pool(&x, &b);
        for alpha in [0.5, 2.0, 7.25] {
            let scaled = roi_pool(&x.scaled(alpha), &b);
            assert!(scaled.max_abs_diff(&base.scale(alpha)).unwrap() < 1e-12);
        }
    }
}
