//! Time-indexed store of per-clip actor features.
//!
//! On-disk layout (little-endian):
//!
//! ```text
//! "LFB1" | u32 version=1 | u32 dim | u32 video_count
//! per video:  u32 name_len | name (UTF-8) | u32 record_count
//! per record: i64 timestamp_s | u32 rows | rows*dim f64, row-major
//! ```
//!
//! Videos are written in lexicographic order of their ids and records in
//! ascending timestamp order, so equal banks serialise to equal bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{to_u32, Reader, Writer};
use crate::error::{Error, Result};
use crate::long_term::FeatureWindow;
use crate::numerics::Matrix;

pub const BANK_MAGIC: &[u8; 4] = b"LFB1";
pub const BANK_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct BankRecord {
    pub video_id: String,
    pub timestamp_s: i64,
    pub feats: Matrix,
}

/// Which bank records around a query time make up the context.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub radius_s: u64,
    pub include_center: bool,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            radius_s: 8,
            include_center: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    dim: usize,
    videos: BTreeMap<String, BTreeMap<i64, Matrix>>,
}

impl FeatureBank {
    pub fn new(dim: usize) -> Self {
        FeatureBank {
            dim,
            videos: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_videos(&self) -> usize {
        self.videos.len()
    }

    pub fn num_records(&self) -> usize {
        self.videos.values().map(BTreeMap::len).sum()
    }

    pub fn video_ids(&self) -> impl Iterator<Item = &str> {
        self.videos.keys().map(String::as_str)
    }

    /// Timestamps of one video, ascending.
    pub fn timeline(&self, video_id: &str) -> Vec<i64> {
        self.videos
            .get(video_id)
            .map(|t| t.keys().copied().collect())
            .unwrap_or_default()
    }

    pub fn get(&self, video_id: &str, timestamp_s: i64) -> Option<&Matrix> {
        self.videos.get(video_id)?.get(&timestamp_s)
    }

    /// All records in file order.
    pub fn records(&self) -> impl Iterator<Item = (&str, i64, &Matrix)> {
        self.videos
            .iter()
            .flat_map(|(v, tl)| tl.iter().map(move |(&t, m)| (v.as_str(), t, m)))
    }

    /// Inserts a record; an existing `(video, timestamp)` entry is replaced.
    pub fn insert(&mut self, record: BankRecord) -> Result<()> {
        if record.feats.cols() != self.dim {
            return Err(Error::dim(
                "FeatureBank::insert",
                (record.feats.rows(), self.dim),
                record.feats.shape(),
            ));
        }
        self.videos
            .entry(record.video_id)
            .or_default()
            .insert(record.timestamp_s, record.feats);
        Ok(())
    }

    /// Rows from records with `|t' - t| <= radius_s`, skipping `t' == t`
    /// unless `include_center`. Unknown videos give an empty window.
    pub fn query_window(&self, video_id: &str, t: i64, spec: WindowSpec) -> FeatureWindow {
        let Some(timeline) = self.videos.get(video_id) else {
            return FeatureWindow::empty(self.dim);
        };
        let lo = t.saturating_sub_unsigned(spec.radius_s);
        let hi = t.saturating_add_unsigned(spec.radius_s);
        let mut parts = Vec::new();
        let mut stamps = Vec::new();
        for (&ts, feats) in timeline.range(lo..=hi) {
            if ts == t && !spec.include_center {
                continue;
            }
            parts.push(feats);
            stamps.extend(std::iter::repeat_n(ts, feats.rows()));
        }
        let ctx = Matrix::vstack(&parts, self.dim).expect("bank rows share dim");
        FeatureWindow {
            ctx,
            source_timestamps: stamps,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(BANK_MAGIC);
        w.u32(BANK_VERSION);
        w.u32(to_u32(self.dim, "dim")?);
        w.u32(to_u32(self.videos.len(), "video count")?);
        for (name, timeline) in &self.videos {
            w.string(name);
            w.u32(to_u32(timeline.len(), "record count")?);
            for (&ts, feats) in timeline {
                w.i64(ts);
                w.u32(to_u32(feats.rows(), "record rows")?);
                w.matrix_data(feats);
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(BANK_MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != BANK_VERSION {
            return Err(Error::format(at, format!("unsupported bank version {version}")));
        }
        let dim = r.u32("dim")? as usize;
        let n_videos = r.u32("video count")?;
        let mut bank = FeatureBank::new(dim);
        for _ in 0..n_videos {
            let at = r.offset();
            let name = r.string("video name")?;
            if bank.videos.contains_key(&name) {
                return Err(Error::format(at, format!("duplicate video '{name}'")));
            }
            let n_records = r.u32("record count")?;
            let mut timeline = BTreeMap::new();
            let mut prev: Option<i64> = None;
            for _ in 0..n_records {
                let at = r.offset();
                let ts = r.i64("timestamp")?;
                if prev.is_some_and(|p| ts <= p) {
                    return Err(Error::format(at, format!("timestamp {ts} not strictly ascending")));
                }
                prev = Some(ts);
                let rows = r.u32("record rows")? as usize;
                let feats = r.matrix(rows, dim, "record features")?;
                timeline.insert(ts, feats);
            }
            bank.videos.insert(name, timeline);
        }
        r.finish()?;
        Ok(bank)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        FeatureBank::from_bytes(&std::fs::read(path)?)
    }

    /// Loads and checks the stored feature dimension.
    pub fn load_with_dim(path: impl AsRef<Path>, dim: usize) -> Result<Self> {
        let bank = FeatureBank::load(path)?;
        if bank.dim != dim {
            // dim lives right after magic and version
            return Err(Error::format(8, format!("bank dim {} but expected {dim}", bank.dim)));
        }
        Ok(bank)
    }

    /// Human-readable per-video summary.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "dim={} videos={} records={}",
            self.dim,
            self.num_videos(),
            self.num_records()
        );
        let _ = writeln!(s, "{:<24} {:>8} {:>8} {:>10} {:>10}", "video", "records", "rows", "first_s", "last_s");
        for (name, tl) in &self.videos {
            let rows: usize = tl.values().map(Matrix::rows).sum();
            let first = tl.keys().next().map_or("-".into(), |t| t.to_string());
            let last = tl.keys().next_back().map_or("-".into(), |t| t.to_string());
            let _ = writeln!(s, "{:<24} {:>8} {:>8} {:>10} {:>10}", name, tl.len(), rows, first, last);
        }
        s
    }

    /// One JSON object per record. For inspection only: values are printed
    /// as JSON numbers and are not guaranteed to reload bit-exactly.
    pub fn export_ndjson<W: Write>(&self, mut out: W) -> Result<()> {
        for (video, ts, feats) in self.records() {
            let rows: Vec<&[f64]> = feats.iter_rows().collect();
            let obj = serde_json::json!({
                "video_id": video,
                "timestamp_s": ts,
                "rows": feats.rows(),
                "dim": self.dim,
                "feats": rows,
            });
            serde_json::to_writer(&mut out, &obj)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(video: &str, t: i64, rows: usize, fill: f64) -> BankRecord {
        BankRecord {
            video_id: video.into(),
            timestamp_s: t,
            feats: Matrix::filled(rows, 3, fill),
        }
    }

    #[test]
    fn insert_cases() {
        let mut bank = FeatureBank::new(3);
        bank.insert(rec("a", 5, 2, 1.0)).unwrap();
        assert_eq!(bank.timeline("a"), vec![5]);

        bank.insert(rec("a", 5, 1, 9.0)).unwrap();
        assert_eq!(bank.timeline("a").len(), 1);
        assert_eq!(bank.get("a", 5).unwrap(), &Matrix::filled(1, 3, 9.0));

        for t in [3, 1, 2] {
            bank.insert(rec("b", t, 1, t as f64)).unwrap();
        }
        assert_eq!(bank.timeline("b"), vec![1, 2, 3]);

        let bad = BankRecord {
            video_id: "a".into(),
            timestamp_s: 0,
            feats: Matrix::zeros(1, 4),
        };
        assert!(bank.insert(bad).is_err());
    }

    #[test]
    fn window_cases() {
        let mut bank = FeatureBank::new(3);
        for t in [0, 2, 4, 6] {
            bank.insert(rec("v", t, 1, t as f64)).unwrap();
        }
        bank.insert(rec("w", 3, 1, -1.0)).unwrap();

        let w = bank.query_window("v", 4, WindowSpec { radius_s: 0, include_center: true });
        assert_eq!(w.source_timestamps, vec![4]);
        let w = bank.query_window("v", 3, WindowSpec { radius_s: 0, include_center: true });
        assert!(w.is_empty());

        let w = bank.query_window("v", 2, WindowSpec { radius_s: 100, include_center: false });
        assert_eq!(w.source_timestamps, vec![0, 4, 6]);

        // interval scan oracle
        let spec = WindowSpec { radius_s: 2, include_center: false };
        let w = bank.query_window("v", 3, spec);
        let expected: Vec<i64> = bank
            .timeline("v")
            .into_iter()
            .filter(|&ts| (ts - 3).unsigned_abs() <= 2 && ts != 3)
            .collect();
        assert_eq!(expected, vec![2, 4]);
        assert_eq!(w.source_timestamps, expected);
        assert_eq!(w.ctx.row(0), &[2.0; 3]);
        assert_eq!(w.ctx.row(1), &[4.0; 3]);

        assert!(bank.query_window("missing", 0, spec).is_empty());
        assert_eq!(bank.query_window("missing", 0, spec).ctx.cols(), 3);
    }

    fn random_bank(rng: &mut ChaCha8Rng) -> FeatureBank {
        let dim = rng.random_range(1..6);
        let mut bank = FeatureBank::new(dim);
        for v in 0..rng.random_range(0..4) {
            for _ in 0..rng.random_range(0..6) {
                let rows = rng.random_range(0..4);
                bank.insert(BankRecord {
                    video_id: format!("video_{v}"),
                    timestamp_s: rng.random_range(-20..20),
                    feats: Matrix::random_normal(rows, dim, 3.0, rng),
                })
                .unwrap();
            }
        }
        bank
    }

    #[test]
    fn empty_bank_roundtrip() {
        let bank = FeatureBank::new(7);
        assert_eq!(FeatureBank::from_bytes(&bank.to_bytes().unwrap()).unwrap(), bank);
    }

    #[test]
    fn truncation_reports_offset() {
        let mut bank = FeatureBank::new(2);
        bank.insert(rec_dim2("clip", 1)).unwrap();
        let bytes = bank.to_bytes().unwrap();
        // header 16 + name (4 + 4) + count 4 + ts 8 + rows 4 = 40, then 2 rows * 2 * 8 = 32
        assert_eq!(bytes.len(), 72);
        let cut = &bytes[..60];
        match FeatureBank::from_bytes(cut) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 40),
            other => panic!("expected format error, got {other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(FeatureBank::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(FeatureBank::from_bytes(&extra), Err(Error::Format { offset: 72, .. })));
    }

    fn rec_dim2(video: &str, t: i64) -> BankRecord {
        BankRecord {
            video_id: video.into(),
            timestamp_s: t,
            feats: Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]),
        }
    }

    #[test]
    fn dim_mismatch_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.lfb");
        FeatureBank::new(4).save(&path).unwrap();
        assert!(FeatureBank::load_with_dim(&path, 4).is_ok());
        assert!(matches!(
            FeatureBank::load_with_dim(&path, 5),
            Err(Error::Format { offset: 8, .. })
        ));
    }

    #[test]
    fn ndjson_has_one_line_per_record() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = random_bank(&mut rng);
        let mut out = Vec::new();
        bank.export_ndjson(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), bank.num_records());
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("video_id").is_some());
        }
        assert!(bank.summary().starts_with(&format!("dim={}", bank.dim())));
    }

    proptest! {
        #[test]
        fn save_load_roundtrip(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bank = random_bank(&mut rng);
            let back = FeatureBank::from_bytes(&bank.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(&back, &bank);
            for ((_, _, a), (_, _, b)) in bank.records().zip(back.records()) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }

        #[test]
        fn window_order_independent_and_monotone(seed in any::<u64>(), t in -25i64..25, r in 0u64..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bank = random_bank(&mut rng);
            let mut records: Vec<BankRecord> = bank.records().map(|(v, ts, m)| BankRecord {
                video_id: v.to_string(), timestamp_s: ts, feats: m.clone() }).collect();
            records.reverse();
            let mut other = FeatureBank::new(bank.dim());
            for rec in records { other.insert(rec).unwrap(); }
            for include_center in [false, true] {
                let spec = WindowSpec { radius_s: r, include_center };
                let wider = WindowSpec { radius_s: r + 3, include_center };
                for v in bank.video_ids() {
                    let a = bank.query_window(v, t, spec);
                    prop_assert_eq!(&a, &other.query_window(v, t, spec));
                    let b = bank.query_window(v, t, wider);
                    for ts in &a.source_timestamps {
                        prop_assert!(b.source_timestamps.contains(ts));
                    }
                    prop_assert!(b.len() >= a.len());
                    for &ts in &a.source_timestamps {
                        prop_assert!(bank.get(v, ts).is_some());
                    }
                }
            }
        }
    }
}
