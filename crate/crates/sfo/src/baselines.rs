//! Reference optimizers for head-to-head benchmarking: SGD, SGD with
//! momentum, AdaGrad, SAG, and full-batch LBFGS, all consuming the same
//! [`Objective`] interface, plus a hyperparameter grid driver.
//!
//! Each optimizer is exposed two ways: as a pure update formula (for the
//! stochastic methods) and as a stateful [`Runner`] that the harness steps
//! against a pass budget with uniform evaluation accounting.

use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::DVector;
#[cfg(test)]
use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optimizer::SfoError;
use crate::problem::{CountingObjective, Objective, ProblemError};

/// Smoothing constant inside AdaGrad's square root.
pub const ADAGRAD_EPS: f64 = 1e-10;

/// Armijo sufficient-decrease parameter for the LBFGS line search.
pub const LINE_SEARCH_DECREASE: f64 = 1e-4;

/// Line-search step halving factor and trial cap.
pub const LINE_SEARCH_BACKTRACK: f64 = 0.5;
pub const LINE_SEARCH_MAX_TRIALS: usize = 40;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Sfo(#[from] SfoError),
    #[error("grid search needs a non-empty hyperparameter grid")]
    EmptyGrid,
}

// ---------------------------------------------------------------------------
// Pure update formulas
// ---------------------------------------------------------------------------

/// One stochastic gradient step: `x − step·f′ᵢ(x)`.
pub fn sgd_step(x: &DVector<f64>, gradient: &DVector<f64>, step_size: f64) -> DVector<f64> {
    x - gradient * step_size
}

/// One momentum step: `v′ = momentum·v − step·g`, `x′ = x + v′`.
pub fn momentum_step(
    x: &DVector<f64>,
    velocity: &DVector<f64>,
    gradient: &DVector<f64>,
    step_size: f64,
    momentum: f64,
) -> (DVector<f64>, DVector<f64>) {
    let v = velocity * momentum - gradient * step_size;
    (x + &v, v)
}

/// One AdaGrad step: per-coordinate rescaling by the accumulated squared
/// gradients, `x′ = x − step·g/√(acc′ + ε)`.
pub fn adagrad_step(
    x: &DVector<f64>,
    accumulator: &DVector<f64>,
    gradient: &DVector<f64>,
    initial_step: f64,
) -> (DVector<f64>, DVector<f64>) {
    let acc = accumulator + gradient.component_mul(gradient);
    let scaled = gradient.zip_map(&acc, |g, a| g / (a + ADAGRAD_EPS).sqrt());
    (x - scaled * initial_step, acc)
}

// ---------------------------------------------------------------------------
// Stateful runners
// ---------------------------------------------------------------------------

/// How stochastic methods pick the next subfunction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexOrder {
    #[default]
    Uniform,
    Cyclic,
}

struct IndexPicker {
    order: IndexOrder,
    rng: ChaCha8Rng,
    cursor: usize,
    n: usize,
}

impl IndexPicker {
    fn new(order: IndexOrder, seed: u64, n: usize) -> Self {
        Self {
            order,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cursor: n.saturating_sub(1),
            n,
        }
    }

    fn next(&mut self) -> usize {
        match self.order {
            IndexOrder::Uniform => self.rng.gen_range(0..self.n),
            IndexOrder::Cyclic => {
                self.cursor = (self.cursor + 1) % self.n;
                self.cursor
            }
        }
    }
}

/// A steppable optimizer the harness can drive. One call to [`Runner::step`]
/// performs the method's natural unit of work (one subfunction evaluation
/// for the stochastic methods, one full iteration for LBFGS); evaluation
/// accounting happens in the problem wrapper, not here.
pub trait Runner {
    fn step(&mut self, problem: &dyn Objective) -> Result<(), RunnerError>;
    /// Current iterate in the full parameter space.
    fn current_x(&self) -> DVector<f64>;
    /// True once the runner cannot make further progress (line-search
    /// failure); the harness stops the run and records the status.
    fn halted(&self) -> bool {
        false
    }
}

pub struct SgdRunner {
    x: DVector<f64>,
    step_size: f64,
    picker: IndexPicker,
}

impl SgdRunner {
    pub fn new(dim: usize, n: usize, step_size: f64, order: IndexOrder, seed: u64) -> Self {
        Self {
            x: DVector::zeros(dim),
            step_size,
            picker: IndexPicker::new(order, seed, n),
        }
    }
}

impl Runner for SgdRunner {
    fn step(&mut self, problem: &dyn Objective) -> Result<(), RunnerError> {
        let i = self.picker.next();
        let e = problem.eval(i, &self.x)?;
        self.x = sgd_step(&self.x, &e.gradient, self.step_size);
        Ok(())
    }

    fn current_x(&self) -> DVector<f64> {
        self.x.clone()
    }
}

pub struct MomentumRunner {
    x: DVector<f64>,
    velocity: DVector<f64>,
    step_size: f64,
    momentum: f64,
    picker: IndexPicker,
}

impl MomentumRunner {
    pub fn new(
        dim: usize,
        n: usize,
        step_size: f64,
        momentum: f64,
        order: IndexOrder,
        seed: u64,
    ) -> Self {
        Self {
            x: DVector::zeros(dim),
            velocity: DVector::zeros(dim),
            step_size,
            momentum,
            picker: IndexPicker::new(order, seed, n),
        }
    }
}

impl Runner for MomentumRunner {
    fn step(&mut self, problem: &dyn Objective) -> Result<(), RunnerError> {
        let i = self.picker.next();
        let e = problem.eval(i, &self.x)?;
        let (x, v) = momentum_step(&self.x, &self.velocity, &e.gradient, self.step_size, self.momentum);
        self.x = x;
        self.velocity = v;
        Ok(())
    }

    fn current_x(&self) -> DVector<f64> {
        self.x.clone()
    }
}

pub struct AdaGradRunner {
    x: DVector<f64>,
    accumulator: DVector<f64>,
    step_size: f64,
    picker: IndexPicker,
}

impl AdaGradRunner {
    pub fn new(dim: usize, n: usize, step_size: f64, order: IndexOrder, seed: u64) -> Self {
        Self {
            x: DVector::zeros(dim),
            accumulator: DVector::zeros(dim),
            step_size,
            picker: IndexPicker::new(order, seed, n),
        }
    }
}

impl Runner for AdaGradRunner {
    fn step(&mut self, problem: &dyn Objective) -> Result<(), RunnerError> {
        let i = self.picker.next();
        let e = problem.eval(i, &self.x)?;
        let (x, acc) = adagrad_step(&self.x, &self.accumulator, &e.gradient, self.step_size);
        self.x = x;
        self.accumulator = acc;
        Ok(())
    }

    fn current_x(&self) -> DVector<f64> {
        self.x.clone()
    }
}

/// Stochastic average gradient: a per-subfunction gradient table whose
/// running mean is the update direction. Memory is O(MN).
pub struct SagRunner {
    x: DVector<f64>,
    table: Vec<DVector<f64>>,
    mean: DVector<f64>,
    step_size: f64,
    picker: IndexPicker,
}

impl SagRunner {
    pub fn new(dim: usize, n: usize, step_size: f64, order: IndexOrder, seed: u64) -> Self {
        Self {
            x: DVector::zeros(dim),
            table: (0..n).map(|_| DVector::zeros(dim)).collect(),
            mean: DVector::zeros(dim),
            step_size,
            picker: IndexPicker::new(order, seed, n),
        }
    }

    /// The maintained mean of the stored gradients.
    pub fn stored_mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn table(&self) -> &[DVector<f64>] {
        &self.table
    }
}

impl Runner for SagRunner {
    fn step(&mut self, problem: &dyn Objective) -> Result<(), RunnerError> {
        let i = self.picker.next();
        let e = problem.eval(i, &self.x)?;
        let n = self.table.len() as f64;
        self.mean += (&e.gradient - &self.table[i]) / n;
        self.table[i] = e.gradient;
        self.x -= &self.mean * self.step_size;
        Ok(())
    }

    fn current_x(&self) -> DVector<f64> {
        self.x.clone()
    }
}

/// Why an LBFGS run stopped early.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LbfgsStatus {
    Running,
    /// Backtracking exhausted its trials without sufficient decrease.
    LineSearchFailed,
    /// Gradient norm underflowed; the iterate is a stationary point.
    Converged,
}

/// Full-batch limited-memory BFGS with two-loop recursion and a
/// backtracking line search. One [`Runner::step`] is one iteration: a full
/// gradient plus however many full-batch value evaluations the line search
/// spends, all of which count toward effective passes.
pub struct LbfgsRunner {
    x: DVector<f64>,
    value: Option<f64>,
    gradient: Option<DVector<f64>>,
    s_history: VecDeque<DVector<f64>>,
    y_history: VecDeque<DVector<f64>>,
    history_length: usize,
    status: LbfgsStatus,
}

impl LbfgsRunner {
    pub fn new(x0: DVector<f64>, history_length: usize) -> Self {
        Self {
            x: x0,
            value: None,
            gradient: None,
            s_history: VecDeque::new(),
            y_history: VecDeque::new(),
            history_length: history_length.max(1),
            status: LbfgsStatus::Running,
        }
    }

    pub fn status(&self) -> LbfgsStatus {
        self.status
    }

    pub fn gradient_norm(&self) -> Option<f64> {
        self.gradient.as_ref().map(|g| g.norm())
    }

    /// Two-loop recursion: applies the inverse-Hessian approximation
    /// implied by the (s, y) history to the gradient.
    fn search_direction(&self, gradient: &DVector<f64>) -> DVector<f64> {
        let mut q = gradient.clone();
        let m = self.s_history.len();
        let mut alphas = vec![0.0; m];
        for i in (0..m).rev() {
            let s = &self.s_history[i];
            let y = &self.y_history[i];
            let rho = 1.0 / y.dot(s);
            alphas[i] = rho * s.dot(&q);
            q -= y * alphas[i];
        }
        if let (Some(s), Some(y)) = (self.s_history.back(), self.y_history.back()) {
            // Standard initial scaling: the Rayleigh estimate of the most
            // recent curvature pair.
            q *= s.dot(y) / y.dot(y);
        }
        for i in 0..m {
            let s = &self.s_history[i];
            let y = &self.y_history[i];
            let rho = 1.0 / y.dot(s);
            let beta = rho * y.dot(&q);
            q += s * (alphas[i] - beta);
        }
        -q
    }
}

impl Runner for LbfgsRunner {
    fn step(&mut self, problem: &dyn Objective) -> Result<(), RunnerError> {
        if self.status != LbfgsStatus::Running {
            return Ok(());
        }
        if self.value.is_none() {
            let e = problem.full_objective(&self.x)?;
            self.value = Some(e.value);
            self.gradient = Some(e.gradient);
        }
        let f0 = self.value.unwrap();
        let g0 = self.gradient.clone().unwrap();
        if g0.norm() == 0.0 {
            self.status = LbfgsStatus::Converged;
            return Ok(());
        }
        let mut direction = self.search_direction(&g0);
        let mut slope = g0.dot(&direction);
        if slope >= 0.0 {
            // Not a descent direction: drop the history and retry with
            // steepest descent.
            self.s_history.clear();
            self.y_history.clear();
            direction = -&g0;
            slope = g0.dot(&direction);
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..LINE_SEARCH_MAX_TRIALS {
            let candidate = &self.x + &direction * alpha;
            let e = problem.full_objective(&candidate)?;
            if e.value <= f0 + LINE_SEARCH_DECREASE * alpha * slope {
                accepted = Some((alpha, e));
                break;
            }
            alpha *= LINE_SEARCH_BACKTRACK;
        }
        let Some((mut alpha, mut e)) = accepted else {
            self.status = LbfgsStatus::LineSearchFailed;
            return Ok(());
        };
        // One interpolation refinement: the minimizer of the quadratic
        // through φ(0), φ′(0), φ(α). For quadratic objectives this is the
        // exact line minimum, which is what makes the iteration terminate
        // in at most `dim` steps there; elsewhere it is a free improvement.
        // The extra evaluation is counted like any other.
        let denom = e.value - f0 - slope * alpha;
        if denom > 0.0 {
            let refined = -0.5 * slope * alpha * alpha / denom;
            if refined.is_finite() && refined > 0.0 {
                let candidate = &self.x + &direction * refined;
                let er = problem.full_objective(&candidate)?;
                if er.value <= e.value
                    && er.value <= f0 + LINE_SEARCH_DECREASE * refined * slope
                {
                    alpha = refined;
                    e = er;
                }
            }
        }
        let candidate = &self.x + &direction * alpha;

        let s = &candidate - &self.x;
        let y = &e.gradient - &g0;
        if s.dot(&y) > 1e-12 * s.norm() * y.norm() {
            self.s_history.push_back(s);
            self.y_history.push_back(y);
            if self.s_history.len() > self.history_length {
                self.s_history.pop_front();
                self.y_history.pop_front();
            }
        }
        self.x = candidate;
        self.value = Some(e.value);
        self.gradient = Some(e.gradient);
        Ok(())
    }

    fn current_x(&self) -> DVector<f64> {
        self.x.clone()
    }

    fn halted(&self) -> bool {
        self.status != LbfgsStatus::Running
    }
}

/// Runs full-batch LBFGS until the pass budget is exhausted, returning the
/// per-iteration trace. Line-search evaluations count toward the budget.
pub fn lbfgs_minimize<P: Objective + ?Sized>(
    problem: &P,
    x0: DVector<f64>,
    history_length: usize,
    max_passes: f64,
) -> Result<(Vec<TracePoint>, LbfgsStatus), RunnerError> {
    let mut runner = LbfgsRunner::new(x0, history_length);
    let trace = run_trace(problem, max_passes, 1, &mut runner)?;
    Ok((trace, runner.status()))
}

// ---------------------------------------------------------------------------
// Trace driving and grid search
// ---------------------------------------------------------------------------

/// One sampled point of a run: work done, objective reached, time spent.
#[derive(Debug, Clone)]
pub struct TracePoint {
    pub step: u64,
    pub effective_passes: f64,
    pub objective: f64,
    pub wall_seconds: f64,
}

/// Drives a runner until the effective-pass budget is spent (or the runner
/// halts), sampling the full objective out-of-band every `sample_every`
/// steps. The returned trace always contains the initial and final states.
pub fn run_trace<P: Objective + ?Sized>(
    problem: &P,
    passes: f64,
    sample_every: usize,
    runner: &mut dyn Runner,
) -> Result<Vec<TracePoint>, RunnerError> {
    let counting = CountingObjective::new(problem);
    run_trace_with(&counting, problem, passes, sample_every, runner)
}

/// [`run_trace`] against a caller-provided counter, for runners whose
/// construction already consumed counted evaluations.
pub fn run_trace_with<P: Objective + ?Sized>(
    counting: &CountingObjective<'_, P>,
    problem: &P,
    passes: f64,
    sample_every: usize,
    runner: &mut dyn Runner,
) -> Result<Vec<TracePoint>, RunnerError> {
    let start = Instant::now();
    let sample_every = sample_every.max(1) as u64;
    let mut trace = Vec::new();
    let mut step = 0u64;
    let sample = |step: u64, runner: &dyn Runner, trace: &mut Vec<TracePoint>, passes_done: f64| -> Result<(), RunnerError> {
        let objective = problem.full_objective(&runner.current_x())?.value;
        trace.push(TracePoint {
            step,
            effective_passes: passes_done,
            objective,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        Ok(())
    };
    sample(0, runner, &mut trace, counting.effective_passes())?;
    while counting.effective_passes() < passes && !runner.halted() {
        runner.step(counting)?;
        step += 1;
        if step % sample_every == 0 {
            sample(step, runner, &mut trace, counting.effective_passes())?;
        }
    }
    if step % sample_every != 0 {
        sample(step, runner, &mut trace, counting.effective_passes())?;
    }
    Ok(trace)
}

/// Which baseline a configuration drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Sgd,
    SgdMomentum,
    AdaGrad,
    Sag,
    Lbfgs,
}

impl std::fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            BaselineMethod::Sgd => "sgd",
            BaselineMethod::SgdMomentum => "sgd_momentum",
            BaselineMethod::AdaGrad => "adagrad",
            BaselineMethod::Sag => "sag",
            BaselineMethod::Lbfgs => "lbfgs",
        };
        write!(f, "{name}")
    }
}

/// A fully specified baseline run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    pub step_size: f64,
    /// Momentum coefficient; meaningful for [`BaselineMethod::SgdMomentum`].
    pub momentum: f64,
    /// History length; meaningful for [`BaselineMethod::Lbfgs`].
    pub history_length: usize,
    pub order: IndexOrder,
    pub seed: u64,
}

impl BaselineConfig {
    pub fn new(method: BaselineMethod, step_size: f64) -> Self {
        Self {
            method,
            step_size,
            momentum: 0.0,
            history_length: 10,
            order: IndexOrder::Uniform,
            seed: 0,
        }
    }

    /// Canonical hyperparameter label used in traces and summaries.
    pub fn hyperparams(&self) -> String {
        match self.method {
            BaselineMethod::SgdMomentum => {
                format!("step={:e},momentum={}", self.step_size, self.momentum)
            }
            BaselineMethod::Lbfgs => format!("history={}", self.history_length),
            _ => format!("step={:e}", self.step_size),
        }
    }

    pub fn make_runner(&self, dim: usize, n: usize) -> Box<dyn Runner> {
        match self.method {
            BaselineMethod::Sgd => Box::new(SgdRunner::new(
                dim,
                n,
                self.step_size,
                self.order,
                self.seed,
            )),
            BaselineMethod::SgdMomentum => Box::new(MomentumRunner::new(
                dim,
                n,
                self.step_size,
                self.momentum,
                self.order,
                self.seed,
            )),
            BaselineMethod::AdaGrad => Box::new(AdaGradRunner::new(
                dim,
                n,
                self.step_size,
                self.order,
                self.seed,
            )),
            BaselineMethod::Sag => Box::new(SagRunner::new(
                dim,
                n,
                self.step_size,
                self.order,
                self.seed,
            )),
            BaselineMethod::Lbfgs => Box::new(LbfgsRunner::new(
                DVector::zeros(dim),
                self.history_length,
            )),
        }
    }
}

/// Step sizes at every integer power of ten in `[1e-5, 1e2]`.
pub fn default_step_grid() -> Vec<f64> {
    (-5..=2).map(|e| 10f64.powi(e)).collect()
}

/// The standard momentum grid.
pub fn default_momentum_grid() -> Vec<f64> {
    vec![0.5, 0.9, 0.95, 0.99]
}

/// The default hyperparameter grid for a method: every power-of-ten step
/// size, crossed with the momentum grid where applicable. LBFGS has no
/// tunable step and gets a single cell.
pub fn default_grid(method: BaselineMethod, seed: u64) -> Vec<BaselineConfig> {
    let mut grid = Vec::new();
    match method {
        BaselineMethod::SgdMomentum => {
            for &step in &default_step_grid() {
                for &momentum in &default_momentum_grid() {
                    let mut c = BaselineConfig::new(method, step);
                    c.momentum = momentum;
                    c.seed = seed;
                    grid.push(c);
                }
            }
        }
        BaselineMethod::Lbfgs => {
            let mut c = BaselineConfig::new(method, 1.0);
            c.seed = seed;
            grid.push(c);
        }
        _ => {
            for &step in &default_step_grid() {
                let mut c = BaselineConfig::new(method, step);
                c.seed = seed;
                grid.push(c);
            }
        }
    }
    grid
}

/// Everything a grid search produced: every cell's trace plus which cell
/// won (lowest final full objective; ties break toward the smaller step,
/// i.e. the earlier grid entry).
pub struct GridOutcome {
    pub configs: Vec<BaselineConfig>,
    pub traces: Vec<Vec<TracePoint>>,
    pub final_objectives: Vec<f64>,
    pub best: usize,
    /// The winning value sat at the edge of the grid — the sweep should be
    /// widened.
    pub best_on_boundary: bool,
}

impl GridOutcome {
    pub fn best_config(&self) -> &BaselineConfig {
        &self.configs[self.best]
    }

    pub fn best_trace(&self) -> &[TracePoint] {
        &self.traces[self.best]
    }
}

/// Runs every configuration in the grid for the given pass budget with a
/// shared seed and picks the best final objective. Runs that blow up
/// (non-finite objective) stay in the outcome with an infinite final value.
pub fn grid_search<P: Objective + ?Sized>(
    problem: &P,
    passes: f64,
    sample_every: usize,
    grid: &[BaselineConfig],
) -> Result<GridOutcome, RunnerError> {
    if grid.is_empty() {
        return Err(RunnerError::EmptyGrid);
    }
    let dim = problem.dimension();
    let n = problem.subfunction_count();
    let mut traces = Vec::with_capacity(grid.len());
    let mut final_objectives = Vec::with_capacity(grid.len());
    for config in grid {
        let mut runner = config.make_runner(dim, n);
        let trace = match run_trace(problem, passes, sample_every, runner.as_mut()) {
            Ok(t) => t,
            Err(RunnerError::Problem(ProblemError::NonFiniteOutput)) => Vec::new(),
            Err(e) => return Err(e),
        };
        let last = trace
            .last()
            .map(|p| p.objective)
            .filter(|v| v.is_finite())
            .unwrap_or(f64::INFINITY);
        final_objectives.push(last);
        traces.push(trace);
    }
    let mut best = 0;
    for (i, v) in final_objectives.iter().enumerate() {
        if *v < final_objectives[best] {
            best = i;
        }
    }
    let best_on_boundary = grid.len() > 1 && (best == 0 || best == grid.len() - 1);
    if best_on_boundary {
        log::warn!(
            "grid search for {} selected a boundary value ({}); widen the grid",
            grid[best].method,
            grid[best].hyperparams()
        );
    }
    Ok(GridOutcome {
        configs: grid.to_vec(),
        traces,
        final_objectives,
        best,
        best_on_boundary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{make_logistic_regression, make_quadratic_ensemble, QuadraticEnsemble};
    use approx::assert_relative_eq;

    fn dvec(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn sgd_step_formula() {
        // ½x² at x = 1 with step 0.1: gradient is 1.
        let x = sgd_step(&dvec(&[1.0]), &dvec(&[1.0]), 0.1);
        assert_relative_eq!(x[0], 0.9, epsilon = 1e-15);
        // Zero gradient leaves x unchanged.
        let x = sgd_step(&dvec(&[1.0]), &dvec(&[0.0]), 0.1);
        assert_eq!(x[0], 1.0);
    }

    #[test]
    fn momentum_reduces_to_sgd_when_zero() {
        let x = dvec(&[0.4, -0.3]);
        let g = dvec(&[1.0, 2.0]);
        let (xm, v) = momentum_step(&x, &dvec(&[0.0, 0.0]), &g, 0.05, 0.0);
        let xs = sgd_step(&x, &g, 0.05);
        assert_eq!(xm, xs);
        assert_eq!(v, -g * 0.05);
    }

    #[test]
    fn momentum_preserves_velocity_without_gradient() {
        let v0 = dvec(&[0.7, -0.2]);
        let (x, v) = momentum_step(&dvec(&[0.0, 0.0]), &v0, &dvec(&[0.0, 0.0]), 0.1, 1.0);
        assert_eq!(v, v0);
        assert_eq!(x, v0);
    }

    #[test]
    fn adagrad_first_step_is_signed_unit_step() {
        let g = dvec(&[3.0, -0.5, 0.0]);
        let (x, acc) = adagrad_step(&dvec(&[0.0, 0.0, 0.0]), &dvec(&[0.0, 0.0, 0.0]), &g, 0.1);
        assert_relative_eq!(x[0], -0.1, max_relative = 1e-6);
        assert_relative_eq!(x[1], 0.1, max_relative = 1e-6);
        assert_eq!(x[2], 0.0);
        assert_eq!(acc[0], 9.0);
    }

    #[test]
    fn adagrad_effective_step_decays_like_inverse_sqrt() {
        let g = dvec(&[2.0]);
        let mut x = dvec(&[0.0]);
        let mut acc = dvec(&[0.0]);
        let mut moves = Vec::new();
        for _ in 0..100 {
            let before = x[0];
            let (nx, nacc) = adagrad_step(&x, &acc, &g, 1.0);
            moves.push((before - nx[0]).abs());
            x = nx;
            acc = nacc;
        }
        // After t identical gradients the move is step/√t.
        assert_relative_eq!(moves[99] / moves[0], (1.0f64 / 100.0).sqrt(), max_relative = 1e-3);
    }

    #[test]
    fn sag_mean_matches_full_gradient_after_refreshing_every_entry() {
        let problem = make_quadratic_ensemble(5, 4, 6, 10.0).unwrap();
        let mut sag = SagRunner::new(4, 6, 0.0, IndexOrder::Cyclic, 0);
        // Step size zero: x stays fixed while the table fills.
        for _ in 0..6 {
            sag.step(&problem).unwrap();
        }
        let full = problem.full_objective(&sag.current_x()).unwrap().gradient;
        let expect = full / 6.0;
        assert!((sag.stored_mean() - &expect).norm() <= 1e-12 * expect.norm().max(1.0));
        assert_eq!(sag.table().len(), 6);
        assert_eq!(sag.table()[0].len(), 4);
    }

    #[test]
    fn sag_maintained_mean_never_drifts() {
        let problem = make_logistic_regression(7, 60, 5, 6, 1e-2).unwrap();
        let mut sag = SagRunner::new(5, 6, 0.05, IndexOrder::Uniform, 3);
        for _ in 0..200 {
            sag.step(&problem).unwrap();
            let mut direct = DVector::zeros(5);
            for g in sag.table() {
                direct += g;
            }
            direct /= 6.0;
            assert!((sag.stored_mean() - &direct).norm() <= 1e-12 * direct.norm().max(1.0));
        }
    }

    #[test]
    fn lbfgs_minimizes_quadratic_within_dimension_iterations() {
        let problem = make_quadratic_ensemble(3, 8, 4, 10.0).unwrap();
        let mut runner = LbfgsRunner::new(DVector::zeros(8), 10);
        for _ in 0..8 {
            runner.step(&problem).unwrap();
        }
        let g = problem
            .full_objective(&runner.current_x())
            .unwrap()
            .gradient;
        assert!(g.norm() <= 1e-8, "gradient norm {}", g.norm());
        assert_eq!(runner.status(), LbfgsStatus::Running);
    }

    #[test]
    fn lbfgs_descends_on_logistic_regression() {
        let problem = make_logistic_regression(5, 200, 10, 5, 1e-2).unwrap();
        let (trace, status) = lbfgs_minimize(&problem, DVector::zeros(10), 10, 15.0).unwrap();
        // Monotone descent to a stationary point of the convex objective.
        for pair in trace.windows(2) {
            assert!(pair[1].objective <= pair[0].objective + 1e-12);
        }
        assert!(trace.last().unwrap().objective < trace[0].objective * 0.6);
        assert_ne!(status, LbfgsStatus::LineSearchFailed);
        // Effective passes account line-search evaluations too, so the
        // trace spends more than one pass per iteration.
        assert!(trace.last().unwrap().effective_passes > trace.len() as f64 - 1.0);
    }

    #[test]
    fn sgd_improves_at_its_best_grid_step() {
        let problem = make_logistic_regression(11, 200, 10, 5, 1e-2).unwrap();
        let grid = default_grid(BaselineMethod::Sgd, 0);
        let outcome = grid_search(&problem, 20.0, 5, &grid).unwrap();
        let best = outcome.best_trace();
        assert!(best.last().unwrap().objective < best[0].objective);
    }

    #[test]
    fn grid_search_singleton_returns_that_config() {
        let problem = make_quadratic_ensemble(1, 3, 2, 5.0).unwrap();
        let grid = vec![BaselineConfig::new(BaselineMethod::Sgd, 0.01)];
        let outcome = grid_search(&problem, 2.0, 1, &grid).unwrap();
        assert_eq!(outcome.best, 0);
        assert!(!outcome.best_on_boundary);
    }

    #[test]
    fn grid_search_rejects_empty_grid() {
        let problem = make_quadratic_ensemble(1, 3, 2, 5.0).unwrap();
        assert!(matches!(
            grid_search(&problem, 1.0, 1, &[]),
            Err(RunnerError::EmptyGrid)
        ));
    }

    #[test]
    fn grid_search_ties_break_toward_smaller_step() {
        // A zero-pass budget makes every cell return the initial objective;
        // the winner must then be the smallest step.
        let problem = make_quadratic_ensemble(2, 3, 2, 5.0).unwrap();
        let grid = default_grid(BaselineMethod::Sgd, 0);
        let outcome = grid_search(&problem, 0.0, 1, &grid).unwrap();
        assert_eq!(outcome.best, 0);
        assert_relative_eq!(outcome.best_config().step_size, 1e-5);
    }

    #[test]
    fn sgd_grid_selects_interior_step_on_quadratic_ensemble() {
        let problem = make_quadratic_ensemble(9, 10, 5, 10.0).unwrap();
        let grid = default_grid(BaselineMethod::Sgd, 0);
        let outcome = grid_search(&problem, 10.0, 5, &grid).unwrap();
        assert!(
            !outcome.best_on_boundary,
            "selected step {} sits on the grid edge",
            outcome.best_config().step_size
        );
    }

    #[test]
    fn uniform_and_cyclic_orders_are_both_available() {
        // A single shifted quadratic keeps SGD's stationary point exactly at
        // the optimum, so both orderings descend monotonically in
        // expectation regardless of the noise floor.
        let problem = QuadraticEnsemble::from_parts(
            vec![DMatrix::identity(3, 3); 2],
            vec![dvec(&[2.0, 0.0, 1.0]), dvec(&[2.0, 0.0, 1.0])],
        )
        .unwrap();
        for order in [IndexOrder::Uniform, IndexOrder::Cyclic] {
            let mut runner = SgdRunner::new(3, 2, 0.05, order, 7);
            for _ in 0..60 {
                runner.step(&problem).unwrap();
            }
            let f0 = problem.full_objective(&DVector::zeros(3)).unwrap().value;
            let f = problem.full_objective(&runner.current_x()).unwrap().value;
            assert!(f < f0);
        }
    }
}
