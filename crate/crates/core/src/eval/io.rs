use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::{DetectionRecord, GroundTruthRecord};
use crate::bbox::BBox;
use crate::error::{Error, Result};

fn csv_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

struct Row {
    video_id: String,
    timestamp_s: i64,
    bbox: BBox,
    class_id: u32,
    score: Option<f64>,
}

fn read_rows(path: &Path) -> Result<Vec<Row>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e.to_string()))?;
    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e.to_string()))?;
        let line = line + 1;
        if rec.len() != 7 && rec.len() != 8 {
            return Err(csv_err(path, format!("line {line}: expected 7 or 8 fields, got {}", rec.len())));
        }
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|_| csv_err(path, format!("line {line}: field {} is not a number: {:?}", i + 1, &rec[i])))
        };
        let timestamp_s = rec[1]
            .parse::<i64>()
            .map_err(|_| csv_err(path, format!("line {line}: bad timestamp {:?}", &rec[1])))?;
        let bbox = BBox::new(num(2)?, num(3)?, num(4)?, num(5)?)
            .map_err(|e| csv_err(path, format!("line {line}: {e}")))?;
        let class_id = rec[6]
            .parse::<u32>()
            .map_err(|_| csv_err(path, format!("line {line}: bad class id {:?}", &rec[6])))?;
        let score = if rec.len() == 8 {
            let s = num(7)?;
            if !(0.0..=1.0).contains(&s) {
                return Err(csv_err(path, format!("line {line}: score {s} outside [0, 1]")));
            }
            Some(s)
        } else {
            None
        };
        rows.push(Row {
            video_id: rec[0].to_string(),
            timestamp_s,
            bbox,
            class_id,
            score,
        });
    }
    Ok(rows)
}

/// `video_id,timestamp_s,x1,y1,x2,y2,class_id,score`, no header.
pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<DetectionRecord>> {
    let path = path.as_ref();
    read_rows(path)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let score = r
                .score
                .ok_or_else(|| csv_err(path, format!("line {}: detection without score", i + 1)))?;
            Ok(DetectionRecord {
                video_id: r.video_id,
                timestamp_s: r.timestamp_s,
                bbox: r.bbox,
                class_id: r.class_id,
                score,
            })
        })
        .collect()
}

/// Same layout as detections without the score column. A trailing score
/// column, if present, is ignored.
pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<Vec<GroundTruthRecord>> {
    Ok(read_rows(path.as_ref())?
        .into_iter()
        .map(|r| GroundTruthRecord {
            video_id: r.video_id,
            timestamp_s: r.timestamp_s,
            bbox: r.bbox,
            class_id: r.class_id,
        })
        .collect())
}

fn fmt_box(b: &BBox) -> String {
    format!("{:.6},{:.6},{:.6},{:.6}", b.x1(), b.y1(), b.x2(), b.y2())
}

pub fn write_detections<W: Write>(mut out: W, dets: &[DetectionRecord]) -> Result<()> {
    for d in dets {
        writeln!(
            out,
            "{},{},{},{},{:.6}",
            d.video_id,
            d.timestamp_s,
            fmt_box(&d.bbox),
            d.class_id,
            d.score
        )?;
    }
    Ok(())
}

pub fn write_ground_truth<W: Write>(mut out: W, gts: &[GroundTruthRecord]) -> Result<()> {
    for g in gts {
        writeln!(out, "{},{},{},{}", g.video_id, g.timestamp_s, fmt_box(&g.bbox), g.class_id)?;
    }
    Ok(())
}

/// One class id per line; blank lines and `#` comments skipped.
pub fn read_class_filter(path: impl AsRef<Path>) -> Result<BTreeSet<u32>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut out = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let id = line
            .split(',')
            .next()
            .unwrap_or_default()
            .trim()
            .parse::<u32>()
            .map_err(|_| csv_err(path, format!("line {}: bad class id {line:?}", i + 1)))?;
        out.insert(id);
    }
    Ok(out)
}

/// JSON report written by the `eval` command.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub deltas: Vec<f64>,
    pub weighted: bool,
    pub per_delta: Vec<DeltaReport>,
    pub final_map: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DeltaReport {
    pub delta: f64,
    pub per_class_ap: BTreeMap<u32, f64>,
    pub map: f64,
}

impl EvalReport {
    pub fn compute(
        dets: &[DetectionRecord],
        gts: &[GroundTruthRecord],
        deltas: &[f64],
        weighted: bool,
        class_filter: Option<&BTreeSet<u32>>,
    ) -> Result<Self> {
        if deltas.is_empty() {
            return Err(Error::InvalidArgument("no IoU thresholds given".into()));
        }
        let mut per_delta = Vec::with_capacity(deltas.len());
        for &delta in deltas {
            let res = if weighted {
                super::weighted_frame_map(dets, gts, delta, class_filter)?
            } else {
                super::frame_map(dets, gts, delta, class_filter)?
            };
            per_delta.push(DeltaReport {
                delta,
                per_class_ap: res.per_class_ap,
                map: res.map_value,
            });
        }
        let final_map = per_delta.iter().map(|d| d.map).sum::<f64>() / per_delta.len() as f64;
        Ok(EvalReport {
            deltas: deltas.to_vec(),
            weighted,
            per_delta,
            final_map,
        })
    }

    /// Per-class AP table, one column per threshold.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:>8}", "class");
        for d in &self.deltas {
            let _ = write!(s, " {:>10}", format!("AP@{d}"));
        }
        s.push('\n');
        let classes: BTreeSet<u32> = self
            .per_delta
            .iter()
            .flat_map(|d| d.per_class_ap.keys().copied())
            .collect();
        for c in classes {
            let _ = write!(s, "{c:>8}");
            for d in &self.per_delta {
                let _ = write!(s, " {:>10.6}", d.per_class_ap.get(&c).copied().unwrap_or(f64::NAN));
            }
            s.push('\n');
        }
        let _ = write!(s, "{:>8}", "mAP");
        for d in &self.per_delta {
            let _ = write!(s, " {:>10.6}", d.map);
        }
        s.push('\n');
        let label = if self.weighted { "final w-mAP" } else { "final mAP" };
        let _ = writeln!(s, "{label}: {:.6}", self.final_map);
        s
    }
}
