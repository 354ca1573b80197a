//! Build a feature bank from a synthetic dataset, save it, reload it, query
//! a temporal window, and watch a damaged file get rejected.
//!
//! cargo run --example feature_bank

use lstc::feature_bank::{FeatureBank, WindowSpec};
use lstc::pipeline::{build_bank, synth_generate, SynthConfig};

fn main() -> lstc::Result<()> {
    let data = synth_generate(&SynthConfig { n_videos: 3, clips_per_video: 6, seed: 1, ..SynthConfig::default() })?;
    let bank = build_bank(&data)?;
    print!("{}", bank.summary());

    let dir = std::env::temp_dir().join("lstc-feature-bank-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("bank.lfb");
    bank.save(&path)?;
    let back = FeatureBank::load(&path)?;
    println!("saved {} bytes, reload equal: {}", std::fs::metadata(&path)?.len(), back == bank);

    for spec in [
        WindowSpec { radius_s: 1, include_center: false },
        WindowSpec { radius_s: 2, include_center: true },
    ] {
        let win = back.query_window("vid001", 3, spec);
        println!("window around vid001@3 {spec:?}: {} rows from t={:?}", win.len(), win.source_timestamps);
    }

    let mut bytes = bank.to_bytes()?;
    bytes.truncate(bytes.len() - 3);
    match FeatureBank::from_bytes(&bytes) {
        Err(e) => println!("truncated file: {e}"),
        Ok(_) => unreachable!("a truncated bank never parses"),
    }
    Ok(())
}
