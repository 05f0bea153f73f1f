//! The desk-scale convex benchmark: untuned SFO against grid-searched
//! first-order baselines on synthetic L2-regularized logistic regression.
//!
//! Prints each method's best objective gap `F − F*` after a fixed budget of
//! effective passes, where `F*` comes from the deterministic full-batch
//! descent oracle. Every optimizer sees identical problems and identical
//! evaluation accounting (one pass = N subfunction evaluations).
//!
//! Run with: `cargo run --release --example logistic_benchmark`

use sfo::baselines::{default_grid, grid_search, BaselineMethod};
use sfo::optimizer::{Sfo, SfoConfig};
use sfo::problem::{make_logistic_regression, Objective};

fn main() {
    let passes = 20.0;
    let mut problem = make_logistic_regression(3, 2000, 100, 20, 1e-3).unwrap();
    print!("deriving the reference optimum... ");
    problem.derive_optimum(1e-10, 1_000_000).unwrap();
    let (_, f_star) = problem.analytic_optimum().unwrap();
    println!("F* = {f_star:.12}");

    // SFO runs once, with default settings and no tuning.
    let n = problem.subfunction_count() as f64;
    let mut opt = Sfo::new(&problem, SfoConfig::default()).unwrap();
    while (opt.eval_count() as f64) < passes * n {
        opt.step(&problem).unwrap();
    }
    let sfo_gap = problem.full_objective(&opt.current_x()).unwrap().value - f_star;
    println!("\n{:<14} {:>12} {:>26}", "method", "F − F*", "hyperparameters");
    println!("{:<14} {:>12.3e} {:>26}", "sfo", sfo_gap, "(none)");

    // Each baseline gets its full hyperparameter grid.
    for method in [
        BaselineMethod::Sgd,
        BaselineMethod::SgdMomentum,
        BaselineMethod::AdaGrad,
        BaselineMethod::Sag,
        BaselineMethod::Lbfgs,
    ] {
        let grid = default_grid(method, 0);
        let cells = grid.len();
        let outcome = grid_search(&problem, passes, 40, &grid).unwrap();
        let gap = outcome.final_objectives[outcome.best] - f_star;
        println!(
            "{:<14} {:>12.3e} {:>26}",
            format!("{method} ({cells})"),
            gap,
            outcome.best_config().hyperparams()
        );
    }
}
