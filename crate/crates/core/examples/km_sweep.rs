//! Grid over the number of reader units (K) and second-order heads per unit
//! (M), each cell trained from the same stage-1 model and seed.
//!
//! cargo run --release --example km_sweep

use std::time::Instant;

use lstc::pipeline::{build_bank, sweep_km, synth_generate, train, SynthConfig, TrainConfig};

fn main() -> lstc::Result<()> {
    let data = synth_generate(&SynthConfig { seed: 4, ..SynthConfig::default() })?;
    let (tr, te) = data.split_videos(72);
    let base = TrainConfig { seed: 4, ..TrainConfig::default() };
    let s1 = train(&tr, &base, None, None)?;
    let bank = build_bank(&data)?;

    let t = Instant::now();
    let stage2 = TrainConfig { stage: 2, steps: 4000, ..base };
    let rows = sweep_km(&tr, &te, &s1.model, &bank, &stage2, &[1, 2, 3], &[1, 2, 3])?;
    println!("long-term mAP@0.5 on held-out videos ({:.1?})", t.elapsed());
    println!("  K\\M {:>8} {:>8} {:>8}", 1, 2, 3);
    for k in 1..=3 {
        let cells: Vec<String> = rows.iter().filter(|r| r.k == k).map(|r| format!("{:>8.4}", r.metric)).collect();
        println!("  {k:>3} {}", cells.join(" "));
    }
    Ok(())
}
