//! Train the short-term branch briefly, then export one actor's attention
//! over the clip as per-frame PGM images and CSV grids.
//!
//! cargo run --release --example attention_heatmap [out_dir]

use lstc::pipeline::{pool_actors, synth_generate, train, SynthConfig, TrainConfig};
use lstc::short_term::{export_heatmap, write_heatmap};

fn main() -> lstc::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("lstc-heatmaps"));
    let data = synth_generate(&SynthConfig { n_videos: 8, c_longterm: 0, seed: 2, ..SynthConfig::default() })?;
    let model = train(&data, &TrainConfig { steps: 400, ..TrainConfig::default() }, None, None)?.model;

    let clip = &data.clips[0];
    let actors = pool_actors(&clip.features, &clip.boxes)?;
    let (_, cache) = model.short.forward(&clip.features, actors.features())?;
    let hm = export_heatmap(cache.attention(), 0)?;

    println!("actor 0 box {:?}", clip.boxes[0].to_array());
    for (t, frame) in hm.frames.iter().enumerate() {
        println!("frame {t}:");
        for r in 0..frame.rows() {
            let cells: Vec<String> = frame.row(r).iter().map(|v| format!("{v:.3}")).collect();
            println!("  {}", cells.join(" "));
        }
    }
    for p in write_heatmap(&hm, 0, &out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
