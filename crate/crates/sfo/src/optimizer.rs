//! The SFO optimization loop.
//!
//! The optimizer maintains one quadratic model per subfunction, anchored at
//! that subfunction's latest evaluation with exact value and gradient, and
//! curvature estimated by [`crate::hessian`]. Each step:
//!
//! 1. picks a target subfunction (the one evaluated farthest from the
//!    current point under a curvature metric),
//! 2. minimizes the summed model with a damped Newton step,
//! 3. evaluates the target there (the only evaluation of the step),
//! 4. rejects the move if the measured value contradicts the model by more
//!    than the predicted gain (a "bad update": position resets and the step
//!    length halves),
//! 5. expands the shared subspace with the new gradient,
//! 6. refreshes the target's history and model,
//! 7. collapses the subspace when it outgrows its cap,
//! 8. decays the step length back toward one, and
//! 9. grows the active subfunction set when the average gradient falls
//!    below its standard error, after a bad update, or after a stagnant
//!    pass.
//!
//! Everything is deterministic given the seed: the only randomness is the
//! coin flip choosing the distance metric in step 1.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hessian::{self, HessianError, SubfunctionRecord};
use crate::problem::{Objective, ProblemError};
use crate::subspace::{ProjectionUpdate, Subspace, SubspaceError};

#[derive(Debug, Error)]
pub enum SfoError {
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Subspace(#[from] SubspaceError),
    #[error(transparent)]
    Hessian(#[from] HessianError),
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
}

/// A second-order model of one subfunction around an anchor point, in
/// subspace coordinates. Evaluating the model at its anchor reproduces the
/// anchored value and gradient exactly.
#[derive(Debug, Clone)]
pub struct QuadraticModel {
    pub anchor: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
    /// Curvature asserted along directions appended to the subspace after
    /// this model was last fitted (the unexplored-direction scale of its
    /// Hessian estimate, which the next refit would assert there anyway).
    /// Padding with zero instead would leave the summed model with
    /// near-zero curvature along every fresh direction and make Newton
    /// steps overshoot wildly.
    pub pad_curvature: f64,
}

impl QuadraticModel {
    /// Model value at `x`.
    pub fn evaluate(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.anchor;
        self.value + self.gradient.dot(&d) + 0.5 * d.dot(&(&self.hessian * &d))
    }

    /// Model gradient at `x`.
    pub fn gradient_at(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.gradient + &self.hessian * (x - &self.anchor)
    }

    pub(crate) fn pad(&mut self, extra: usize) {
        let k = self.anchor.len();
        let grow = |v: &mut DVector<f64>| {
            let mut out = DVector::zeros(v.len() + extra);
            out.rows_mut(0, v.len()).copy_from(v);
            *v = out;
        };
        grow(&mut self.anchor);
        grow(&mut self.gradient);
        let mut h = DMatrix::zeros(k + extra, k + extra);
        h.view_mut((0, 0), (k, k)).copy_from(&self.hessian);
        for i in k..k + extra {
            h[(i, i)] = self.pad_curvature;
        }
        self.hessian = h;
    }

    pub(crate) fn remap(&mut self, projection: &DMatrix<f64>) {
        self.anchor = projection * &self.anchor;
        self.gradient = projection * &self.gradient;
        let h = projection * &self.hessian * projection.transpose();
        self.hessian = (&h + h.transpose()) * 0.5;
    }
}

/// How the target subfunction is picked once every active subfunction has
/// been evaluated. Maximum-distance is the default; the other orderings are
/// kept for comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    #[default]
    MaxDistance,
    Random,
    Cyclic,
}

#[derive(Debug, Clone)]
pub struct SfoConfig {
    /// Seed for the metric coin flip (and random selection, if chosen).
    pub seed: u64,
    /// Starting point; zero vector when absent.
    pub x0: Option<DVector<f64>>,
    /// History pairs kept per subfunction.
    pub history_length: usize,
    /// Subspace size floor; `2N` when absent.
    pub k_min: Option<usize>,
    /// Subspace size cap triggering collapse; `3N` when absent.
    pub k_max: Option<usize>,
    /// Eigenvalue floor fraction for positive-definiteness enforcement.
    pub gamma: f64,
    /// Initial step length.
    pub eta0: f64,
    /// Initial active-set size.
    pub initial_active: usize,
    pub selection: SelectionRule,
}

impl Default for SfoConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            x0: None,
            history_length: hessian::DEFAULT_HISTORY_LEN,
            k_min: None,
            k_max: None,
            gamma: 1e-8,
            eta0: 1.0,
            initial_active: 2,
            selection: SelectionRule::MaxDistance,
        }
    }
}

/// Why the active set grew.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrowthReason {
    /// The average gradient shrank below its standard error across
    /// subfunctions.
    GradientShrink,
    BadUpdate,
    /// A full pass over the active set finished without growth.
    StagnantPass,
}

/// Noteworthy events recorded during optimization.
#[derive(Debug, Clone, PartialEq)]
pub enum SfoEvent {
    BadUpdate { step: u64 },
    Collapse { step: u64, from_k: usize, to_k: usize },
    ActiveGrowth { step: u64, size: usize, reason: GrowthReason },
    /// The Newton solve failed and a scaled gradient step was taken.
    SolveFallback { step: u64 },
    /// Zero initial gradient and position: the basis was seeded with e₁.
    DefaultBasisSeed,
}

/// Summary of one optimization step.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub step: u64,
    /// Subfunction evaluated this step (exactly one per step).
    pub subfunction: usize,
    pub bad_update: bool,
    pub eta: f64,
    pub subspace_dim: usize,
    pub active_count: usize,
    /// Summed-model value at the post-step position.
    pub model_objective: f64,
    pub collapsed: bool,
    pub grew_active: bool,
}

/// Step-length decay toward one after a successful update, with a time
/// constant of one pass over the active set: `η ← 1/n + (n−1)/n·η`.
pub fn eta_after_success(eta: f64, active_count: usize) -> f64 {
    let n = active_count.max(1) as f64;
    1.0 / n + (n - 1.0) / n * eta
}

/// Step-length halving after a failed update.
pub fn eta_after_failure(eta: f64) -> f64 {
    0.5 * eta
}

/// Sum-of-functions optimizer state.
pub struct Sfo {
    total_n: usize,
    subspace: Subspace,
    records: Vec<SubfunctionRecord>,
    /// Current iterate in subspace coordinates.
    x: DVector<f64>,
    eta: f64,
    step_index: u64,
    rng: ChaCha8Rng,
    active_count: usize,
    gamma: f64,
    selection: SelectionRule,
    /// Aggregate model `G(x) = c + bᵀx + ½xᵀHx` over all fitted models,
    /// updated incrementally and refreshed from scratch once per pass and
    /// at every collapse.
    agg_h: DMatrix<f64>,
    agg_b: DVector<f64>,
    agg_c: f64,
    /// Sum of the models' pad curvatures: the diagonal value a fresh
    /// subspace direction starts with in the aggregate Hessian.
    agg_fill: f64,
    steps_since_growth: usize,
    cyclic_cursor: usize,
    events: Vec<SfoEvent>,
    eval_count: u64,
    bad_update_count: u64,
}

impl Sfo {
    /// Initializes the optimizer: evaluates the first subfunction at the
    /// starting point (the run's first evaluation), seeds the subspace with
    /// that gradient direction plus the starting point's direction when
    /// independent, and activates the first two subfunctions.
    pub fn new<P: Objective + ?Sized>(problem: &P, config: SfoConfig) -> Result<Self, SfoError> {
        let n = problem.subfunction_count();
        let m = problem.dimension();
        if n == 0 || m == 0 {
            return Err(SfoError::InvalidConfig(
                "problem must have at least one subfunction and one parameter".into(),
            ));
        }
        if !(config.eta0 > 0.0 && config.eta0 <= 1.0) {
            return Err(SfoError::InvalidConfig(format!(
                "eta0 must lie in (0, 1], got {}",
                config.eta0
            )));
        }
        if !(config.gamma > 0.0 && config.gamma < 1.0) {
            return Err(SfoError::InvalidConfig(format!(
                "gamma must lie in (0, 1), got {}",
                config.gamma
            )));
        }
        let x0 = config.x0.clone().unwrap_or_else(|| DVector::zeros(m));
        if x0.len() != m {
            return Err(SfoError::InvalidConfig(format!(
                "x0 has length {}, problem dimension is {m}",
                x0.len()
            )));
        }
        if !x0.iter().all(|v| v.is_finite()) {
            return Err(SfoError::InvalidConfig("x0 must be finite".into()));
        }
        let k_min = config.k_min.unwrap_or(2 * n);
        let k_max = config.k_max.unwrap_or(3 * n).max(k_min).max(1);
        let mut subspace = Subspace::new(m, k_min, k_max);
        let mut events = Vec::new();

        let first = problem.eval(0, &x0)?;
        subspace.expand(&first.gradient)?;
        subspace.expand(&x0)?;
        if subspace.k() == 0 {
            subspace.expand(&DVector::from_fn(m, |i, _| if i == 0 { 1.0 } else { 0.0 }))?;
            events.push(SfoEvent::DefaultBasisSeed);
        }
        let k = subspace.k();
        let x = subspace.to_coords(&x0);
        let g_coords = subspace.to_coords(&first.gradient);

        let mut records: Vec<SubfunctionRecord> = (0..n)
            .map(|_| SubfunctionRecord::new(config.history_length))
            .collect();
        records[0].push_evaluation(x.clone(), g_coords.clone(), first.value, 0);
        let first_estimate = hessian::initial_hessian_no_history(k, &[]);
        records[0].model = Some(QuadraticModel {
            anchor: x.clone(),
            value: first.value,
            gradient: g_coords,
            hessian: first_estimate.matrix,
            pad_curvature: first_estimate.unexplored_curvature,
        });

        let mut sfo = Self {
            total_n: n,
            subspace,
            records,
            x,
            eta: config.eta0,
            step_index: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            active_count: config.initial_active.max(1).min(n),
            gamma: config.gamma,
            selection: config.selection,
            agg_h: DMatrix::zeros(k, k),
            agg_b: DVector::zeros(k),
            agg_c: 0.0,
            agg_fill: 0.0,
            steps_since_growth: 0,
            cyclic_cursor: 0,
            events,
            eval_count: 1,
            bad_update_count: 0,
        };
        sfo.rebuild_aggregates();
        Ok(sfo)
    }

    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn active_count(&self) -> usize {
        self.active_count
    }

    pub fn subfunction_count(&self) -> usize {
        self.total_n
    }

    pub fn subspace(&self) -> &Subspace {
        &self.subspace
    }

    pub fn records(&self) -> &[SubfunctionRecord] {
        &self.records
    }

    pub fn events(&self) -> &[SfoEvent] {
        &self.events
    }

    /// Total subfunction evaluations so far, including the one made by
    /// [`Sfo::new`].
    pub fn eval_count(&self) -> u64 {
        self.eval_count
    }

    pub fn bad_update_count(&self) -> u64 {
        self.bad_update_count
    }

    /// Current iterate in subspace coordinates.
    pub fn current_coords(&self) -> &DVector<f64> {
        &self.x
    }

    /// Current iterate in the full parameter space.
    pub fn current_x(&self) -> DVector<f64> {
        self.subspace.to_full(&self.x)
    }

    /// Aggregate Hessian `ΣᵢHᵢ` of the summed model (subspace coordinates).
    pub fn aggregate_hessian(&self) -> &DMatrix<f64> {
        &self.agg_h
    }

    /// Value of the summed model at the current iterate.
    pub fn model_objective(&self) -> f64 {
        self.aggregate_value(&self.x)
    }

    /// `(step, active size)` growth history, starting from the initial size.
    pub fn growth_trace(&self) -> Vec<(u64, usize)> {
        let mut trace = vec![(0, usize::min(2, self.total_n))];
        for e in &self.events {
            if let SfoEvent::ActiveGrowth { step, size, .. } = e {
                trace.push((*step, *size));
            }
        }
        trace
    }

    fn aggregate_value(&self, x: &DVector<f64>) -> f64 {
        self.agg_c + self.agg_b.dot(x) + 0.5 * x.dot(&(&self.agg_h * x))
    }

    fn contribution(model: &QuadraticModel) -> (f64, DVector<f64>) {
        let ha = &model.hessian * &model.anchor;
        let c = model.value - model.gradient.dot(&model.anchor) + 0.5 * model.anchor.dot(&ha);
        let b = &model.gradient - &ha;
        (c, b)
    }

    fn add_contribution(&mut self, model: &QuadraticModel, sign: f64) {
        let (c, b) = Self::contribution(model);
        self.agg_c += sign * c;
        self.agg_b.axpy(sign, &b, 1.0);
        self.agg_fill += sign * model.pad_curvature;
        if sign > 0.0 {
            self.agg_h += &model.hessian;
        } else {
            self.agg_h -= &model.hessian;
        }
    }

    /// Recomputes the aggregate model from scratch, clearing incremental
    /// floating-point drift.
    fn rebuild_aggregates(&mut self) {
        let k = self.subspace.k();
        self.agg_h = DMatrix::zeros(k, k);
        self.agg_b = DVector::zeros(k);
        self.agg_c = 0.0;
        self.agg_fill = 0.0;
        for rec in &self.records {
            if let Some(model) = &rec.model {
                let (c, b) = Self::contribution(model);
                self.agg_c += c;
                self.agg_b += &b;
                self.agg_h += &model.hessian;
                self.agg_fill += model.pad_curvature;
            }
        }
    }

    /// Newton step on the summed model: `x − η·H⁻¹∇G(x)`, solved through a
    /// Cholesky factorization. Falls back to a gradient step scaled by the
    /// largest eigenvalue if the factorization fails.
    fn minimize_g(&mut self, step: u64) -> DVector<f64> {
        let grad = &self.agg_b + &self.agg_h * &self.x;
        let delta = match self.agg_h.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => {
                self.events.push(SfoEvent::SolveFallback { step });
                let lambda_max = self
                    .agg_h
                    .clone()
                    .symmetric_eigen()
                    .eigenvalues
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max)
                    .max(f64::MIN_POSITIVE);
                grad / lambda_max
            }
        };
        &self.x - delta * self.eta
    }

    /// Farthest-last-evaluation argmax under the given metric (the full
    /// aggregate Hessian or each subfunction's own). Ties break toward the
    /// smallest index; scaling the metric by any positive constant leaves
    /// the winner unchanged.
    fn distance_argmax(&self, use_full_metric: bool) -> usize {
        let mut best_i = 0;
        let mut best = f64::NEG_INFINITY;
        for i in 0..self.active_count {
            let last = self.records[i]
                .last()
                .expect("distance rule runs only when all active subfunctions are evaluated");
            let d = &self.x - &last.position;
            let score = if use_full_metric {
                d.dot(&(&self.agg_h * &d))
            } else {
                let h = &self.records[i]
                    .model
                    .as_ref()
                    .expect("evaluated subfunction has a model")
                    .hessian;
                d.dot(&(h * &d))
            };
            if score > best {
                best = score;
                best_i = i;
            }
        }
        best_i
    }

    /// Picks the subfunction to evaluate. Active subfunctions that were
    /// never evaluated come first in index order; afterwards the configured
    /// selection rule applies. The default rule evaluates the subfunction
    /// whose last evaluation lies farthest from the current point, measured
    /// with the subfunction's own Hessian or the full one (a fair coin per
    /// step decides, so one bad per-subfunction estimate cannot starve it).
    fn choose_subfunction(&mut self) -> usize {
        for i in 0..self.active_count {
            if self.records[i].eval_count() == 0 {
                return i;
            }
        }
        match self.selection {
            SelectionRule::Cyclic => {
                self.cyclic_cursor = (self.cyclic_cursor + 1) % self.active_count;
                self.cyclic_cursor
            }
            SelectionRule::Random => self.rng.gen_range(0..self.active_count),
            SelectionRule::MaxDistance => {
                let use_full = self.rng.gen_bool(0.5);
                self.distance_argmax(use_full)
            }
        }
    }

    /// Bad-update test for a fresh measurement of subfunction `j` at the
    /// proposed point: the value rose since the subfunction's previous
    /// evaluation AND overshoots its model by more than the summed model's
    /// predicted reduction. Non-finite measurements are always bad.
    fn is_bad_update(&self, j: usize, value: f64, proposed: &DVector<f64>) -> bool {
        let Some(last) = self.records[j].last() else {
            return false;
        };
        if !value.is_finite() {
            return true;
        }
        if value <= last.value {
            return false;
        }
        let Some(model) = &self.records[j].model else {
            return false;
        };
        let overshoot = value - model.evaluate(proposed);
        let predicted_gain = self.aggregate_value(&self.x) - self.aggregate_value(proposed);
        overshoot > predicted_gain
    }

    /// Extends every stored coordinate vector and matrix after the subspace
    /// gained a column.
    fn pad_state(&mut self, extra: usize) {
        let grow = |v: &mut DVector<f64>| {
            let mut out = DVector::zeros(v.len() + extra);
            out.rows_mut(0, v.len()).copy_from(v);
            *v = out;
        };
        grow(&mut self.x);
        grow(&mut self.agg_b);
        let k = self.agg_h.nrows();
        let mut h = DMatrix::zeros(k + extra, k + extra);
        h.view_mut((0, 0), (k, k)).copy_from(&self.agg_h);
        for i in k..k + extra {
            h[(i, i)] = self.agg_fill;
        }
        self.agg_h = h;
        for rec in &mut self.records {
            rec.pad(extra);
        }
    }

    /// Rebuilds subfunction `j`'s Hessian from its history (or the
    /// no-history rule) and swaps the refreshed model into the aggregates.
    /// `anchor` carries the new anchor data on successful updates; on bad
    /// updates the previous anchor is kept and only the curvature changes.
    fn refresh_model(
        &mut self,
        j: usize,
        anchor: Option<(DVector<f64>, f64, DVector<f64>)>,
    ) -> Result<(), SfoError> {
        let k = self.subspace.k();
        let estimate = if self.records[j].history_len() == 0 {
            let others: Vec<&DMatrix<f64>> = self
                .records
                .iter()
                .enumerate()
                .filter(|(i, r)| *i != j && r.model.is_some())
                .map(|(_, r)| &r.model.as_ref().unwrap().hessian)
                .collect();
            hessian::initial_hessian_no_history(k, &others)
        } else {
            let beta = hessian::init_beta(&self.records[j])?;
            hessian::rebuild_hessian(&self.records[j], beta, self.gamma)?
        };
        let old = self.records[j].model.take();
        if let Some(m) = &old {
            self.add_contribution(m, -1.0);
        }
        let model = match anchor {
            Some((position, value, gradient)) => QuadraticModel {
                anchor: position,
                value,
                gradient,
                hessian: estimate.matrix,
                pad_curvature: estimate.unexplored_curvature,
            },
            None => {
                let mut m = old.expect("bad update implies an existing model");
                m.hessian = estimate.matrix;
                m.pad_curvature = estimate.unexplored_curvature;
                m
            }
        };
        self.add_contribution(&model, 1.0);
        self.records[j].model = Some(model);
        Ok(())
    }

    /// Collapses the subspace onto the most recent gradient and position of
    /// every evaluated active subfunction, remapping all state.
    fn collapse(&mut self, step: u64) -> Result<(), SfoError> {
        let from_k = self.subspace.k();
        let mut grads = Vec::new();
        let mut positions = Vec::new();
        for i in 0..self.active_count {
            if let Some(last) = self.records[i].last() {
                grads.push(last.gradient.clone());
                positions.push(last.position.clone());
            }
        }
        let projection = self.subspace.collapse(&grads, &positions)?;
        self.x = &projection * &self.x;
        for rec in &mut self.records {
            rec.remap(&projection);
        }
        self.rebuild_aggregates();
        self.events.push(SfoEvent::Collapse {
            step,
            from_k,
            to_k: self.subspace.k(),
        });
        Ok(())
    }

    /// The average-gradient shrink criterion for active-set growth: grow
    /// when `ḡᵀH⁻¹ḡ < Σᵢ gᵢᵀH⁻¹gᵢ / ((n−1)n)`, i.e. the mean gradient fell
    /// below its standard error under the inverse-Hessian metric. Computed
    /// over evaluated active subfunctions.
    fn gradient_shrink_criterion(&self) -> bool {
        let grads: Vec<&DVector<f64>> = (0..self.active_count)
            .filter_map(|i| self.records[i].last().map(|l| &l.gradient))
            .collect();
        let n = grads.len();
        if n < 2 {
            return false;
        }
        let Some(ch) = self.agg_h.clone().cholesky() else {
            return false;
        };
        let mut mean = DVector::zeros(self.subspace.k());
        for g in &grads {
            mean += *g;
        }
        mean /= n as f64;
        let lhs = mean.dot(&ch.solve(&mean));
        let rhs_sum: f64 = grads.iter().map(|g| g.dot(&ch.solve(g))).sum();
        lhs < rhs_sum / ((n as f64 - 1.0) * n as f64)
    }

    fn grow_active_set(&mut self, bad_update: bool, step: u64) -> bool {
        self.steps_since_growth += 1;
        if self.active_count >= self.total_n {
            return false;
        }
        let reason = if bad_update {
            Some(GrowthReason::BadUpdate)
        } else if self.gradient_shrink_criterion() {
            Some(GrowthReason::GradientShrink)
        } else if self.steps_since_growth >= self.active_count {
            Some(GrowthReason::StagnantPass)
        } else {
            None
        };
        match reason {
            Some(reason) => {
                self.active_count += 1;
                self.steps_since_growth = 0;
                self.events.push(SfoEvent::ActiveGrowth {
                    step,
                    size: self.active_count,
                    reason,
                });
                true
            }
            None => false,
        }
    }

    /// Performs one full optimization step (exactly one subfunction
    /// evaluation) and reports what happened.
    pub fn step<P: Objective + ?Sized>(&mut self, problem: &P) -> Result<StepReport, SfoError> {
        let step = self.step_index + 1;
        let j = self.choose_subfunction();
        let mut proposed = self.minimize_g(step);

        // Evaluate the target at the proposed point. Numerical blowups
        // (non-finite proposals or measurements) become failed updates.
        let eval = if proposed.iter().all(|v| v.is_finite()) {
            let x_full = self.subspace.to_full(&proposed);
            match problem.eval(j, &x_full) {
                Ok(e) => {
                    self.eval_count += 1;
                    Some(e)
                }
                Err(ProblemError::NonFiniteOutput) | Err(ProblemError::NonFiniteInput) => {
                    self.eval_count += 1;
                    None
                }
                Err(e) => return Err(e.into()),
            }
        } else {
            None
        };

        let bad = match &eval {
            Some(e) => self.is_bad_update(j, e.value, &proposed),
            None => true,
        };
        if bad {
            self.bad_update_count += 1;
            self.events.push(SfoEvent::BadUpdate { step });
        } else {
            self.x = proposed.clone();
        }

        if let Some(e) = &eval {
            // Grow the subspace to include the fresh gradient; everything
            // stored gains a trailing zero coordinate.
            if let ProjectionUpdate::Appended { .. } = self.subspace.expand(&e.gradient)? {
                let grow = 1;
                self.pad_state(grow);
                let mut padded = DVector::zeros(proposed.len() + grow);
                padded.rows_mut(0, proposed.len()).copy_from(&proposed);
                proposed = padded;
            }
            // Record the evaluation (even a failed one: the gradient change
            // along the failed direction is real curvature information) and
            // refresh the model, anchoring it at the point that was actually
            // measured. On a bad update only the position resets; leaving
            // the model anchored at a stale point would keep the summed
            // model wrong in exactly the direction that just misfired.
            let g_coords = self.subspace.to_coords(&e.gradient);
            self.records[j].push_evaluation(proposed.clone(), g_coords.clone(), e.value, step);
            self.refresh_model(j, Some((proposed.clone(), e.value, g_coords)))?;
        }

        let mut collapsed = false;
        if self.subspace.needs_collapse() {
            self.collapse(step)?;
            collapsed = true;
        }

        self.eta = if bad {
            eta_after_failure(self.eta)
        } else {
            eta_after_success(self.eta, self.active_count)
        };
        let grew = self.grow_active_set(bad, step);

        self.step_index = step;
        if step % self.total_n as u64 == 0 && !collapsed {
            // Periodic from-scratch refresh bounds incremental drift.
            self.rebuild_aggregates();
        }

        Ok(StepReport {
            step,
            subfunction: j,
            bad_update: bad,
            eta: self.eta,
            subspace_dim: self.subspace.k(),
            active_count: self.active_count,
            model_objective: self.aggregate_value(&self.x),
            collapsed,
            grew_active: grew,
        })
    }

    /// Full objective at the current iterate. Purely diagnostic: calling it
    /// does not count toward the optimizer's evaluation budget.
    pub fn full_objective<P: Objective + ?Sized>(
        &self,
        problem: &P,
    ) -> Result<f64, ProblemError> {
        Ok(problem.full_objective(&self.current_x())?.value)
    }
}
