//! Stage 1 trains the short-term branch and fills the feature bank; stage 2
//! adds the long-term branch. Reports frame-mAP@0.5 on held-out videos,
//! split into local and long-term classes.
//!
//! cargo run --release --example two_stage_training [seed]

use std::time::Instant;

use lstc::feature_bank::FeatureBank;
use lstc::pipeline::{build_bank, evaluate_model, synth_generate, train, Dataset, ModelState, SynthConfig, TrainConfig};

fn report(name: &str, m: &ModelState, test: &Dataset, bank: &FeatureBank) -> lstc::Result<()> {
    let local = evaluate_model(m, test, Some(bank), Some(&test.local_classes()))?;
    let long = evaluate_model(m, test, Some(bank), Some(&test.long_term_classes()))?;
    println!("{name}: local mAP {local:.4}  long-term mAP {long:.4}");
    Ok(())
}

fn main() -> lstc::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let data = synth_generate(&SynthConfig { seed, ..SynthConfig::default() })?;
    let (train_set, test_set) = data.split_videos(data.config.n_videos * 3 / 4);
    println!("{} train clips, {} test clips", train_set.clips.len(), test_set.clips.len());

    let cfg1 = TrainConfig { seed, ..TrainConfig::default() };
    let t = Instant::now();
    let s1 = train(&train_set, &cfg1, None, None)?;
    println!(
        "stage 1: loss {:.4} -> {:.4} in {:.2?}",
        s1.loss_curve[0],
        s1.loss_curve.last().unwrap(),
        t.elapsed()
    );
    // the bank covers every video; its rows are pooled inputs, not labels
    let bank = build_bank(&data)?;
    report("stage 1", &s1.model, &test_set, &bank)?;

    let cfg2 = TrainConfig { stage: 2, steps: 6000, ..cfg1 };
    let t = Instant::now();
    let s2 = train(&train_set, &cfg2, Some(&s1.model), Some(&bank))?;
    println!(
        "stage 2: loss {:.4} -> {:.4} in {:.2?}",
        s2.loss_curve[0],
        s2.loss_curve.last().unwrap(),
        t.elapsed()
    );
    report("stage 2", &s2.model, &test_set, &bank)?;
    Ok(())
}
