//! Dense actor-to-context attention inside one synthetic clip: pool actor
//! features from their boxes, attend over every grid cell, and show where
//! each actor looks.
//!
//! cargo run --example short_term_attention

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lstc::pipeline::{pool_actors, synth_generate, SynthConfig};
use lstc::short_term::{aggregate, attention_map, short_term_logits, ShortTermParams};

fn main() -> lstc::Result<()> {
    let data = synth_generate(&SynthConfig { n_videos: 1, clips_per_video: 2, seed: 3, ..SynthConfig::default() })?;
    let clip = &data.clips[0];
    let (h, w, t) = clip.features.dims();
    println!("clip {} t={}: {h}x{w} grid, {t} frames, {} actors", clip.video_id, clip.timestamp_s, clip.boxes.len());

    let actors = pool_actors(&clip.features, &clip.boxes)?;
    let params = ShortTermParams::new(data.d(), data.classes(), true, &mut ChaCha8Rng::seed_from_u64(0));
    let a = attention_map(&clip.features, actors.features(), &params)?;

    for (i, bbox) in clip.boxes.iter().enumerate() {
        let row = a.a.row(i);
        let (best, weight) = row
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.total_cmp(y.1))
            .expect("non-empty grid");
        let (ti, rest) = (best / (h * w), best % (h * w));
        println!(
            "actor {i} box {:?}: row sum {:.15}, peak {weight:.4} at frame {ti} cell ({}, {})",
            bbox.to_array(),
            row.iter().sum::<f64>(),
            rest / w,
            rest % w
        );
    }

    let vs = aggregate(&a, &clip.features, &params)?;
    let z = short_term_logits(actors.features(), &vs, &params)?;
    println!("Z_s is {}x{} (actors x classes)", z.rows(), z.cols());
    Ok(())
}
