//! A look inside the shared adaptive subspace while the optimizer runs:
//! dimension growth, collapses, active-set expansion, and step-length
//! dynamics.
//!
//! The subspace gains one direction per step (each fresh gradient's
//! component outside the current span) and collapses back onto the most
//! recent observation per subfunction whenever it exceeds `3N` directions.
//!
//! Run with: `cargo run --release --example subspace_dynamics`

use sfo::optimizer::{Sfo, SfoConfig, SfoEvent};
use sfo::problem::make_quadratic_ensemble;

fn main() {
    // M = 40 with N = 8 gives K_max = 24 < M, so collapses actually occur.
    let problem = make_quadratic_ensemble(21, 40, 8, 50.0).unwrap();
    let mut opt = Sfo::new(&problem, SfoConfig::default()).unwrap();

    println!("{:>5} {:>4} {:>7} {:>8} {:>10} {:>6}", "step", "K", "active", "eta", "G(x)", "event");
    for _ in 0..60 {
        let report = opt.step(&problem).unwrap();
        let event = if report.collapsed {
            "collapse"
        } else if report.grew_active {
            "grow"
        } else if report.bad_update {
            "bad"
        } else {
            ""
        };
        println!(
            "{:>5} {:>4} {:>7} {:>8.3} {:>10.3e} {:>6}",
            report.step,
            report.subspace_dim,
            report.active_count,
            report.eta,
            report.model_objective,
            event
        );
    }

    println!("\nevent log:");
    for event in opt.events() {
        match event {
            SfoEvent::Collapse { step, from_k, to_k } => {
                println!("  step {step:>3}: collapse K {from_k} → {to_k}")
            }
            SfoEvent::ActiveGrowth { step, size, reason } => {
                println!("  step {step:>3}: active set → {size} ({reason:?})")
            }
            SfoEvent::BadUpdate { step } => println!("  step {step:>3}: bad update"),
            other => println!("  {other:?}"),
        }
    }
    println!(
        "\nsubspace: K = {} (bounds {}..{}), {} collapses, orthonormality error {:.2e}",
        opt.subspace().k(),
        opt.subspace().k_min(),
        opt.subspace().k_max(),
        opt.subspace().generation(),
        opt.subspace().orthonormality_error()
    );
}
