//! Convergence on an exactly-modelable problem: a random ensemble of
//! positive-definite quadratics with a known minimizer.
//!
//! The optimizer's per-subfunction quadratic models can represent these
//! subfunctions exactly once enough curvature history accumulates, so the
//! iterate should reach the analytic optimum within a handful of passes.
//!
//! Run with: `cargo run --release --example quadratic_convergence`

use sfo::optimizer::{Sfo, SfoConfig};
use sfo::problem::{make_quadratic_ensemble, Objective};

fn main() {
    let dimension = 20;
    let subfunctions = 10;
    let condition = 100.0;
    let problem = make_quadratic_ensemble(11, dimension, subfunctions, condition).unwrap();
    let (x_star, f_star) = problem.analytic_optimum().unwrap();
    let x_star = x_star.clone();

    let mut opt = Sfo::new(&problem, SfoConfig::default()).unwrap();
    println!(
        "quadratic ensemble: M = {dimension}, N = {subfunctions}, condition = {condition}"
    );
    println!("{:>5} {:>14} {:>14} {:>8} {:>7}", "pass", "‖x − x*‖", "F − F*", "eta", "active");
    for pass in 1..=15 {
        for _ in 0..subfunctions {
            opt.step(&problem).unwrap();
        }
        let x = opt.current_x();
        let f = problem.full_objective(&x).unwrap().value;
        println!(
            "{pass:>5} {:>14.3e} {:>14.3e} {:>8.3} {:>7}",
            (&x - &x_star).norm(),
            f - f_star,
            opt.eta(),
            opt.active_count()
        );
    }
    println!(
        "\n{} bad updates, {} subspace collapses, {} evaluations total",
        opt.bad_update_count(),
        opt.subspace().generation(),
        opt.eval_count()
    );
}
