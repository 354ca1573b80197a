//! Central-difference check of every hand-written backward pass: the
//! primitive ops, each module, and the full stage-2 loss.
//!
//! cargo run --release --example gradient_check [seeds]

use lstc::pipeline::{gradient_suite, GRAD_EPS, GRAD_TOL};

fn main() -> lstc::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    println!("eps {GRAD_EPS:e}, tolerance {GRAD_TOL:e}");
    for seed in 0..seeds {
        let reports = gradient_suite(seed)?;
        let worst = reports.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).expect("non-empty suite");
        println!("seed {seed}: {} checks, worst {} at {:.2e}", reports.len(), worst.op_name, worst.max_rel_err);
        if seed == 0 {
            for r in &reports {
                let verdict = if r.passes(GRAD_TOL) { "ok" } else { "FAIL" };
                println!("  {:<14} {:.2e} {verdict}", r.op_name, r.max_rel_err);
            }
        }
    }
    Ok(())
}
