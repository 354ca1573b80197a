//! Synthetic clips with planted short- and long-term evidence.
//!
//! Every actor carries an identity embedding and, for each of its positive
//! local classes, a class pattern vector; both are written into the grid
//! cells under the actor's box on every frame. There are `2·c_longterm`
//! identities. An actor with identity `a` is positive for long-term class
//! `j` iff identity `(a + j + 1) mod n_ids` shows up in a neighbouring
//! clip of the same video (`0 < |Δt| <= window_radius_s`). Every identity
//! has the same prior for every long-term class and neighbouring clips are
//! drawn independently, so nothing inside the clip predicts these labels.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::eval::{write_ground_truth, GroundTruthRecord};
use crate::numerics::Matrix;
use crate::short_term::ClipFeatureMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_videos: usize,
    pub clips_per_video: usize,
    /// `[h, w, t]`
    pub grid: [usize; 3],
    pub d: usize,
    pub c_local: usize,
    pub c_longterm: usize,
    /// Inclusive `[min, max]`; at most 4 (one actor per grid quadrant).
    pub actors_per_clip: [usize; 2],
    pub noise_sigma: f64,
    /// Neighbourhood used by the long-term labelling rule.
    pub window_radius_s: u64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_videos: 96,
            clips_per_video: 8,
            grid: [4, 4, 2],
            d: 16,
            c_local: 4,
            c_longterm: 4,
            actors_per_clip: [1, 3],
            noise_sigma: 0.1,
            window_radius_s: 1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn classes(&self) -> usize {
        self.c_local + self.c_longterm
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let [h, w, t] = self.grid;
        if self.n_videos == 0 || self.clips_per_video == 0 || h == 0 || w == 0 || t == 0 || self.d == 0 {
            return bad("video, clip, grid and feature counts must all be >= 1".into());
        }
        if self.classes() == 0 {
            return bad("need at least one class".into());
        }
        let [lo, hi] = self.actors_per_clip;
        if lo == 0 || lo > hi || hi > 4 {
            return bad(format!("actors_per_clip must satisfy 1 <= min <= max <= 4, got [{lo}, {hi}]"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if self.c_longterm >= 1 && self.clips_per_video == 1 {
            return bad("long-term classes need more than one clip per video".into());
        }
        if self.c_longterm >= 1 && self.window_radius_s == 0 {
            return bad("long-term classes need window_radius_s >= 1".into());
        }
        Ok(())
    }
}

/// One key frame with its dense features, actor boxes and labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub video_id: String,
    pub timestamp_s: i64,
    pub features: ClipFeatureMap,
    pub boxes: Vec<BBox>,
    /// Identity index per actor (for inspection only).
    pub identities: Vec<usize>,
    /// `N x c` binary labels.
    pub labels: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub config: SynthConfig,
    pub clips: Vec<Clip>,
}

const QUADRANTS: [[f64; 4]; 4] = [
    [0.0, 0.0, 0.5, 0.5],
    [0.5, 0.0, 1.0, 0.5],
    [0.0, 0.5, 0.5, 1.0],
    [0.5, 0.5, 1.0, 1.0],
];

/// Unit vectors, mutually orthogonal while `n <= d`.
fn embeddings(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if i < d {
            for u in &out {
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        out.push(v);
    }
    out
}

/// Generates a dataset. Deterministic in `cfg`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let [h, w, t] = cfg.grid;
    let d = cfg.d;
    let n_ids = 2 * cfg.c_longterm;
    let embeds = embeddings(n_ids + cfg.c_local, d, &mut rng);
    let (id_vecs, patterns) = embeds.split_at(n_ids);

    struct Draft {
        video: usize,
        clip: usize,
        quads: Vec<usize>,
        ids: Vec<usize>,
        local: Vec<Vec<bool>>,
    }

    let mut drafts = Vec::new();
    for video in 0..cfg.n_videos {
        for clip in 0..cfg.clips_per_video {
            let n = rng.random_range(cfg.actors_per_clip[0]..=cfg.actors_per_clip[1]);
            let mut quads = vec![0, 1, 2, 3];
            quads.shuffle(&mut rng);
            quads.truncate(n);
            let ids = (0..n)
                .map(|_| if n_ids > 0 { rng.random_range(0..n_ids) } else { 0 })
                .collect();
            let local = (0..n)
                .map(|_| (0..cfg.c_local).map(|_| rng.random_bool(0.5)).collect())
                .collect();
            drafts.push(Draft { video, clip, quads, ids, local });
        }
    }

    let mut clips = Vec::with_capacity(drafts.len());
    for dr in &drafts {
        let mut x = Matrix::zeros(h * w * t, d);
        if cfg.noise_sigma > 0.0 {
            for v in x.data_mut() {
                *v = cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let boxes: Vec<BBox> = dr
            .quads
            .iter()
            .map(|&q| BBox::try_from(QUADRANTS[q]))
            .collect::<Result<_>>()?;
        let mut labels = Matrix::zeros(boxes.len(), cfg.classes());
        for (a, bbox) in boxes.iter().enumerate() {
            let mut signal = vec![0.0; d];
            if n_ids > 0 {
                signal.iter_mut().zip(&id_vecs[dr.ids[a]]).for_each(|(s, e)| *s += e);
            }
            for (k, &on) in dr.local[a].iter().enumerate() {
                if on {
                    labels.set(a, k, 1.0);
                    signal.iter_mut().zip(&patterns[k]).for_each(|(s, e)| *s += e);
                }
            }
            for (hi, wi) in super::roi::cells_in_box(h, w, bbox) {
                for ti in 0..t {
                    let row = x.row_mut((ti * h + hi) * w + wi);
                    row.iter_mut().zip(&signal).for_each(|(r, s)| *r += s);
                }
            }
            let neighbours: BTreeSet<usize> = drafts
                .iter()
                .filter(|o| {
                    o.video == dr.video && o.clip != dr.clip && o.clip.abs_diff(dr.clip) as u64 <= cfg.window_radius_s
                })
                .flat_map(|o| o.ids.iter().copied())
                .collect();
            for j in 0..cfg.c_longterm {
                if neighbours.contains(&partner(dr.ids[a], j, n_ids)) {
                    labels.set(a, cfg.c_local + j, 1.0);
                }
            }
        }
        clips.push(Clip {
            video_id: video_name(dr.video),
            timestamp_s: dr.clip as i64,
            features: ClipFeatureMap::new(h, w, t, x)?,
            boxes,
            identities: dr.ids.clone(),
            labels,
        });
    }
    Ok(Dataset { config: cfg.clone(), clips })
}

/// Identity whose nearby presence makes identity `id` positive for
/// long-term class `j`.
pub fn partner(id: usize, j: usize, n_ids: usize) -> usize {
    (id + j + 1) % n_ids
}

fn video_name(i: usize) -> String {
    format!("vid{i:03}")
}

pub const DATASET_FILE: &str = "dataset.json";
pub const GT_FILE: &str = "gt.csv";
pub const CONFIG_FILE: &str = "config.json";

impl Dataset {
    pub fn classes(&self) -> usize {
        self.config.classes()
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    /// Class ids of the long-term classes.
    pub fn long_term_classes(&self) -> BTreeSet<u32> {
        let c = self.config.c_local;
        (c..c + self.config.c_longterm).map(|k| k as u32).collect()
    }

    pub fn local_classes(&self) -> BTreeSet<u32> {
        (0..self.config.c_local).map(|k| k as u32).collect()
    }

    /// One record per (actor, positive class).
    pub fn ground_truth(&self) -> Vec<GroundTruthRecord> {
        let mut out = Vec::new();
        for clip in &self.clips {
            for (a, bbox) in clip.boxes.iter().enumerate() {
                for k in 0..clip.labels.cols() {
                    if clip.labels.get(a, k) == 1.0 {
                        out.push(GroundTruthRecord {
                            video_id: clip.video_id.clone(),
                            timestamp_s: clip.timestamp_s,
                            bbox: *bbox,
                            class_id: k as u32,
                        });
                    }
                }
            }
        }
        out
    }

    /// Splits by video: the first `n_train` videos (in id order) train.
    pub fn split_videos(&self, n_train: usize) -> (Dataset, Dataset) {
        let ids: BTreeSet<&str> = self.clips.iter().map(|c| c.video_id.as_str()).collect();
        let train_ids: BTreeSet<&str> = ids.into_iter().take(n_train).collect();
        let (a, b): (Vec<Clip>, Vec<Clip>) = self
            .clips
            .iter()
            .cloned()
            .partition(|c| train_ids.contains(c.video_id.as_str()));
        (
            Dataset { config: self.config.clone(), clips: a },
            Dataset { config: self.config.clone(), clips: b },
        )
    }

    /// Writes `dataset.json`, `config.json` and `gt.csv` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(DATASET_FILE), serde_json::to_vec(self)?)?;
        fs::write(dir.join(CONFIG_FILE), serde_json::to_vec_pretty(&self.config)?)?;
        let mut gt = Vec::new();
        write_ground_truth(&mut gt, &self.ground_truth())?;
        fs::write(dir.join(GT_FILE), gt)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(dir.as_ref().join(DATASET_FILE))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}
