//! Sum of Functions Optimizer (SFO).
//!
//! Minimizes an objective of the form `F(x) = Σᵢ fᵢ(x)` — a sum of `N`
//! differentiable subfunctions over an `M`-dimensional parameter vector —
//! using one subfunction (minibatch) evaluation per update step, as in
//! stochastic gradient descent, while scaling every step with second-order
//! curvature information, as in quasi-Newton methods.
//!
//! The optimizer keeps an independent quadratic model of every subfunction.
//! Each step minimizes the sum of the models by a damped Newton step, then
//! evaluates a single subfunction at the new point and refits its model:
//! value and gradient are matched exactly, and the curvature term comes from
//! a BFGS pass over that subfunction's own history of gradient changes. To
//! stay tractable when `M` is large, all state is stored and all linear
//! algebra is performed in a shared low-dimensional subspace spanned by the
//! recent gradients and iterates, which grows by one direction per step and
//! is periodically collapsed back to the most recent observations.
//!
//! # Crate layout
//!
//! - [`problem`] — the objective interface plus built-in deterministic test
//!   problems (quadratic ensembles, synthetic logistic regression) and a
//!   finite-difference gradient checker.
//! - [`subspace`] — the shared adaptive orthonormal basis: expansion,
//!   size-capped collapse, and projections between representations.
//! - [`hessian`] — per-subfunction history and online Hessian estimation:
//!   the BFGS chain, its history-based initialization, and
//!   positive-definiteness enforcement.
//! - [`optimizer`] — the SFO loop itself: Newton step on the summed model,
//!   target-subfunction choice, bad-update detection, step-length control,
//!   and active-set growth.
//! - [`reference`] — a slow full-space implementation of the same algorithm
//!   (dense `M`-dimensional storage, no coordinate bookkeeping) used to
//!   validate the subspace machinery.
//! - [`baselines`] — SGD, SGD+momentum, AdaGrad, SAG, and LBFGS consuming
//!   the same problem interface, with a hyperparameter grid driver.
//! - [`bench`] — the benchmark harness: run configs, convergence traces,
//!   overhead-scaling measurements, CSV/JSON output.
//!
//! # Example
//!
//! ```
//! use sfo::optimizer::{Sfo, SfoConfig};
//! use sfo::problem::{make_quadratic_ensemble, Objective};
//!
//! let problem = make_quadratic_ensemble(7, 10, 4, 10.0).unwrap();
//! let mut opt = Sfo::new(&problem, SfoConfig::default()).unwrap();
//! for _ in 0..200 {
//!     opt.step(&problem).unwrap();
//! }
//! let x = opt.current_x();
//! let (x_star, _) = problem.analytic_optimum().unwrap();
//! assert!((&x - x_star).norm() < 1e-6);
//! ```

pub mod baselines;
pub mod bench;
pub mod hessian;
pub mod optimizer;
pub mod problem;
pub mod reference;
pub mod subspace;

pub use optimizer::{Sfo, SfoConfig, StepReport};
pub use problem::Objective;
