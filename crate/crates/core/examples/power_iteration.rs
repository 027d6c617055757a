//! Largest singular value by power iteration, persistent and converged,
//! against an eigensolver.

use snlab::linalg::exact_sigma;
use snlab::power::{power_iteration, DenseOp, IterMode, PowerIterState};
use snlab::Rng;

fn main() -> snlab::Result<()> {
    let (rows, cols) = (32, 48);
    let mut rng = Rng::new(7);
    let w: Vec<f64> = (0..rows * cols).map(|_| rng.gaussian()).collect();
    let op = DenseOp::new(&w, rows, cols)?;
    let exact = exact_sigma(&w, rows, cols);

    // one step per call, state carried over as during training
    let mut state = PowerIterState::seeded(cols, rows, 1);
    for call in 1..=20 {
        let r = power_iteration(&op, IterMode::persistent(1), &mut state)?;
        if call % 4 == 0 {
            println!("after {call:2} persistent steps: sigma = {:.10}  (rel. err {:.2e})", r.sigma, (exact - r.sigma) / exact);
        }
    }

    let mut fresh = PowerIterState::seeded(cols, rows, 1);
    let r = power_iteration(&op, IterMode::VERIFY, &mut fresh)?;
    println!("converged in {} iterations: sigma = {:.12}", r.iterations, r.sigma);
    println!("eigensolver:                  sigma = {exact:.12}");
    Ok(())
}
