//! The decoupled second-order attention equals the explicit sum over all
//! context pairs, at linear instead of quadratic cost in the context length.
//!
//! cargo run --release --example second_order_equivalence

use std::hint::black_box;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lstc::long_term::{second_order_decoupled, second_order_full, SecondOrderHead};
use lstc::numerics::Matrix;

fn time(reps: usize, mut f: impl FnMut()) -> f64 {
    let t = Instant::now();
    for _ in 0..reps {
        f();
    }
    t.elapsed().as_secs_f64() / reps as f64
}

fn main() -> lstc::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (n, d, d_k) = (4, 16, 8);
    let head = SecondOrderHead::new(d, d_k, &mut rng);
    let q = Matrix::random_normal(n, d, 1.0, &mut rng);

    println!("{:>5} {:>14} {:>14} {:>12}", "L", "full (s)", "decoupled (s)", "max diff");
    for l in [4, 8, 16, 32, 64, 128, 256] {
        let ctx = Matrix::random_normal(l, d, 1.0, &mut rng);
        let full = second_order_full(&q, &ctx, &head)?;
        let dec = second_order_decoupled(&q, &ctx, &head)?;
        let tf = time(5, || {
            black_box(second_order_full(&q, &ctx, &head).unwrap());
        });
        let td = time(50, || {
            black_box(second_order_decoupled(&q, &ctx, &head).unwrap());
        });
        println!("{l:>5} {tf:>14.3e} {td:>14.3e} {:>12.2e}", full.max_abs_diff(&dec)?);
    }
    Ok(())
}
