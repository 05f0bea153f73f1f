//! Full-space reference implementation of the optimizer, used to validate
//! the subspace machinery.
//!
//! This mirror runs the identical algorithm with every quantity stored in
//! full `R^M` coordinates: positions, gradients and histories as
//! `M`-vectors, Hessians as dense `M×M` matrices, the BFGS recursion as a
//! literal dense loop, and subspace membership handled through explicit
//! Gram-Schmidt projectors instead of coordinate representations, trailing
//! zeros, or collapse projection matrices. Operations whose definition
//! refers to the shared subspace's spectrum (the eigenvalue floor, the
//! median rules, the solve) act on the span restriction `VᵀAV`.
//!
//! It is deliberately slow (`O(M²)`–`O(M³)` per step) and exists so tests
//! can assert that the coordinate-based optimizer in [`crate::optimizer`]
//! produces the same iterates.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::hessian::{EPS_CURVATURE, FIRST_EVER_HESSIAN_SCALE, NONZERO_EIG_REL, REMAP_SHRINK_FACTOR};
use crate::optimizer::{eta_after_failure, eta_after_success, SelectionRule, SfoConfig, SfoError};
use crate::problem::{Objective, ProblemError};
use crate::subspace::{COLLAPSE_RANK_TOL, EPS_EXPAND};

struct FullModel {
    anchor: DVector<f64>,
    value: f64,
    gradient: DVector<f64>,
    hessian: DMatrix<f64>,
    pad_curvature: f64,
}

impl FullModel {
    fn evaluate(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.anchor;
        self.value + self.gradient.dot(&d) + 0.5 * d.dot(&(&self.hessian * &d))
    }

    fn gradient_at(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.gradient + &self.hessian * (x - &self.anchor)
    }
}

#[derive(Default)]
struct FullRecord {
    dx: Vec<DVector<f64>>,
    dg: Vec<DVector<f64>>,
    last: Option<(DVector<f64>, DVector<f64>, f64)>,
    eval_count: u64,
    model: Option<FullModel>,
}

impl FullRecord {
    fn push_evaluation(
        &mut self,
        position: DVector<f64>,
        gradient: DVector<f64>,
        value: f64,
        cap: usize,
    ) {
        if let Some((p, g, _)) = &self.last {
            let dx = &position - p;
            let dg = &gradient - g;
            let curvature = dx.dot(&dg);
            if curvature > EPS_CURVATURE * dx.norm() * dg.norm() && curvature > 0.0 {
                self.dx.push(dx);
                self.dg.push(dg);
                if self.dx.len() > cap {
                    self.dx.remove(0);
                    self.dg.remove(0);
                }
            }
        }
        self.last = Some((position, gradient, value));
        self.eval_count += 1;
    }
}

/// The slow full-space mirror of [`crate::optimizer::Sfo`].
pub struct ReferenceSfo {
    dim: usize,
    total_n: usize,
    /// Orthonormal observation span (the mirror of the subspace basis),
    /// maintained by plain Gram-Schmidt over full-space vectors.
    span: Vec<DVector<f64>>,
    records: Vec<FullRecord>,
    x: DVector<f64>,
    eta: f64,
    step_index: u64,
    rng: ChaCha8Rng,
    active_count: usize,
    gamma: f64,
    history_cap: usize,
    k_max: usize,
    steps_since_growth: usize,
    eval_count: u64,
    bad_update_count: u64,
}

impl ReferenceSfo {
    pub fn new<P: Objective + ?Sized>(problem: &P, config: &SfoConfig) -> Result<Self, SfoError> {
        assert!(
            matches!(config.selection, SelectionRule::MaxDistance),
            "the reference mirrors the default selection rule only"
        );
        let n = problem.subfunction_count();
        let m = problem.dimension();
        let x0 = config.x0.clone().unwrap_or_else(|| DVector::zeros(m));
        let first = problem.eval(0, &x0)?;

        let mut this = Self {
            dim: m,
            total_n: n,
            span: Vec::new(),
            records: (0..n).map(|_| FullRecord::default()).collect(),
            x: x0.clone(),
            eta: config.eta0,
            step_index: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            active_count: config.initial_active.max(1).min(n),
            gamma: config.gamma,
            history_cap: config.history_length,
            k_max: config
                .k_max
                .unwrap_or(3 * n)
                .max(config.k_min.unwrap_or(2 * n))
                .max(1),
            steps_since_growth: 0,
            eval_count: 1,
            bad_update_count: 0,
        };
        this.try_extend_span(&first.gradient);
        this.try_extend_span(&x0);
        if this.span.is_empty() {
            this.try_extend_span(&DVector::from_fn(m, |i, _| if i == 0 { 1.0 } else { 0.0 }));
        }
        let projector = this.span_projector();
        this.records[0].push_evaluation(
            x0.clone(),
            first.gradient.clone(),
            first.value,
            this.history_cap,
        );
        this.records[0].model = Some(FullModel {
            anchor: x0,
            value: first.value,
            gradient: first.gradient,
            hessian: projector * FIRST_EVER_HESSIAN_SCALE,
            pad_curvature: FIRST_EVER_HESSIAN_SCALE,
        });
        Ok(this)
    }

    pub fn current_x(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn span_dim(&self) -> usize {
        self.span.len()
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn active_count(&self) -> usize {
        self.active_count
    }

    pub fn eval_count(&self) -> u64 {
        self.eval_count
    }

    pub fn bad_update_count(&self) -> u64 {
        self.bad_update_count
    }

    fn span_projector(&self) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(self.dim, self.dim);
        for u in &self.span {
            p += u * u.transpose();
        }
        p
    }

    fn span_matrix(&self) -> DMatrix<f64> {
        let mut v = DMatrix::zeros(self.dim, self.span.len());
        for (j, u) in self.span.iter().enumerate() {
            v.set_column(j, u);
        }
        v
    }

    /// Gram-Schmidt append mirroring subspace expansion, including its
    /// in-span threshold. Returns the appended direction, if any.
    fn try_extend_span(&mut self, v: &DVector<f64>) -> Option<DVector<f64>> {
        if self.span.len() >= self.dim {
            return None;
        }
        let mut q = v.clone();
        for _ in 0..2 {
            for u in &self.span {
                let c = u.dot(&q);
                q.axpy(-c, u, 1.0);
            }
        }
        let norm = q.norm();
        if norm <= EPS_EXPAND * v.norm() || norm == 0.0 {
            return None;
        }
        let u = q / norm;
        self.span.push(u.clone());
        Some(u)
    }

    fn aggregate_hessian(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.dim, self.dim);
        for rec in &self.records {
            if let Some(model) = &rec.model {
                h += &model.hessian;
            }
        }
        h
    }

    fn summed_model_value(&self, x: &DVector<f64>) -> f64 {
        self.records
            .iter()
            .filter_map(|r| r.model.as_ref())
            .map(|m| m.evaluate(x))
            .sum()
    }

    fn summed_model_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim);
        for rec in &self.records {
            if let Some(model) = &rec.model {
                g += model.gradient_at(x);
            }
        }
        g
    }

    /// Solves `(H + (I − VVᵀ))δ = rhs`: the complement block acts as the
    /// identity, so inside the span this is the same restricted Newton
    /// solve the coordinate implementation performs.
    fn solve_in_span(&self, h: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
        let mut padded = h + DMatrix::identity(self.dim, self.dim);
        padded -= self.span_projector();
        match padded.clone().cholesky() {
            Some(ch) => ch.solve(rhs),
            None => {
                let lambda_max = padded
                    .symmetric_eigen()
                    .eigenvalues
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max)
                    .max(f64::MIN_POSITIVE);
                rhs / lambda_max
            }
        }
    }

    fn choose_subfunction(&mut self) -> usize {
        for i in 0..self.active_count {
            if self.records[i].eval_count == 0 {
                return i;
            }
        }
        let use_full = self.rng.gen_bool(0.5);
        let agg = self.aggregate_hessian();
        let mut best_i = 0;
        let mut best = f64::NEG_INFINITY;
        for i in 0..self.active_count {
            let (p, _, _) = self.records[i].last.as_ref().unwrap();
            let d = &self.x - p;
            let q = if use_full {
                &agg
            } else {
                &self.records[i].model.as_ref().unwrap().hessian
            };
            let score = d.dot(&(q * &d));
            if score > best {
                best = score;
                best_i = i;
            }
        }
        best_i
    }

    /// β from the squared secant equations, computed by a dense full-space
    /// eigensolve (independent of the span-based production path).
    fn init_beta_dense(record: &FullRecord) -> f64 {
        let m = record.dx.len();
        let dim = record.dx[0].len();
        let mut x = DMatrix::zeros(dim, m);
        let mut g = DMatrix::zeros(dim, m);
        for (col, (dx, dg)) in record.dx.iter().zip(&record.dg).enumerate() {
            x.set_column(col, dx);
            g.set_column(col, dg);
        }
        let svd = x.svd(true, true);
        let sigma_max = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
        let x_pinv = svd
            .pseudo_inverse(1e-12 * sigma_max.max(f64::MIN_POSITIVE))
            .expect("SVD computed with both factors");
        let q_sq = x_pinv.transpose() * g.transpose() * &g * &x_pinv;
        let q_sq = (&q_sq + q_sq.transpose()) * 0.5;
        let eigen = q_sq.symmetric_eigen();
        let mu_max = eigen.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let lambdas: Vec<f64> = eigen
            .eigenvalues
            .iter()
            .map(|&mu| if mu > 1e-14 * mu_max { mu.sqrt() } else { 0.0 })
            .collect();
        let lambda_max = lambdas.iter().cloned().fold(0.0f64, f64::max);
        let beta = lambdas
            .iter()
            .cloned()
            .filter(|&l| l > NONZERO_EIG_REL * lambda_max)
            .fold(f64::INFINITY, f64::min);
        if beta.is_finite() && beta > 0.0 {
            beta
        } else {
            1.0
        }
    }

    fn median(values: &mut [f64]) -> f64 {
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = values.len();
        if n % 2 == 1 {
            values[n / 2]
        } else {
            0.5 * (values[n / 2 - 1] + values[n / 2])
        }
    }

    /// Rebuilds subfunction `j`'s Hessian: the literal dense BFGS recursion
    /// from `β·VVᵀ`, then the eigenvalue floor applied on the span
    /// restriction `VᵀBV`. Returns the matrix and the unexplored scale.
    fn rebuild_hessian(&self, j: usize) -> (DMatrix<f64>, f64) {
        let record = &self.records[j];
        let v = self.span_matrix();
        if record.dx.is_empty() {
            let others: Vec<&DMatrix<f64>> = self
                .records
                .iter()
                .enumerate()
                .filter(|(i, r)| *i != j && r.model.is_some())
                .map(|(_, r)| &r.model.as_ref().unwrap().hessian)
                .collect();
            let scale = if others.is_empty() {
                FIRST_EVER_HESSIAN_SCALE
            } else {
                let mut mean = DMatrix::zeros(self.dim, self.dim);
                for h in &others {
                    mean += *h;
                }
                mean /= others.len() as f64;
                let restricted = v.transpose() * mean * &v;
                let restricted = (&restricted + restricted.transpose()) * 0.5;
                let mut eigs: Vec<f64> = restricted
                    .symmetric_eigen()
                    .eigenvalues
                    .iter()
                    .cloned()
                    .collect();
                Self::median(&mut eigs)
            };
            return (self.span_projector() * scale, scale);
        }

        let beta = Self::init_beta_dense(record);
        let mut b = self.span_projector() * beta;
        for (dx, dg) in record.dx.iter().zip(&record.dg) {
            let uv = dg.dot(dx);
            let bu = &b * dx;
            let ubu = dx.dot(&bu);
            if uv <= EPS_CURVATURE * dx.norm() * dg.norm() || ubu <= 0.0 {
                continue;
            }
            b += dg * dg.transpose() / uv;
            b -= &bu * bu.transpose() / ubu;
        }
        b = (&b + b.transpose()) * 0.5;

        // Positive-definiteness enforcement on the span restriction.
        let restricted = v.transpose() * &b * &v;
        let restricted = (&restricted + restricted.transpose()) * 0.5;
        let eigen = restricted.symmetric_eigen();
        let lambda_max = eigen
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut positives: Vec<f64> = eigen
            .eigenvalues
            .iter()
            .cloned()
            .filter(|&l| l > 0.0)
            .collect();
        let threshold = self.gamma * lambda_max;
        let mut adjusted = eigen.eigenvalues.clone();
        let pad;
        if positives.is_empty() {
            adjusted.fill(1.0);
            pad = 1.0;
        } else {
            let med = Self::median(&mut positives);
            for l in adjusted.iter_mut() {
                if *l < threshold {
                    *l = med;
                }
            }
            pad = if beta < threshold { med } else { beta };
        }
        let fixed =
            &eigen.eigenvectors * DMatrix::from_diagonal(&adjusted) * eigen.eigenvectors.transpose();
        let full = &v * fixed * v.transpose();
        ((&full + full.transpose()) * 0.5, pad)
    }

    fn gradient_shrink_criterion(&self, agg: &DMatrix<f64>) -> bool {
        let grads: Vec<&DVector<f64>> = (0..self.active_count)
            .filter_map(|i| self.records[i].last.as_ref().map(|(_, g, _)| g))
            .collect();
        let n = grads.len();
        if n < 2 {
            return false;
        }
        let mut mean = DVector::zeros(self.dim);
        for g in &grads {
            mean += *g;
        }
        mean /= n as f64;
        let lhs = mean.dot(&self.solve_in_span(agg, &mean));
        let rhs_sum: f64 = grads
            .iter()
            .map(|g| g.dot(&self.solve_in_span(agg, g)))
            .sum();
        lhs < rhs_sum / ((n as f64 - 1.0) * n as f64)
    }

    fn collapse(&mut self) {
        let mut inputs: Vec<DVector<f64>> = Vec::new();
        for i in 0..self.active_count {
            if let Some((_, g, _)) = &self.records[i].last {
                inputs.push(g.clone());
            }
        }
        for i in 0..self.active_count {
            if let Some((p, _, _)) = &self.records[i].last {
                inputs.push(p.clone());
            }
        }
        let mut new_span: Vec<DVector<f64>> = Vec::new();
        for v in &inputs {
            let input_norm = v.norm();
            if input_norm == 0.0 {
                continue;
            }
            let mut q = v.clone();
            for _ in 0..2 {
                for u in &new_span {
                    let c = u.dot(&q);
                    q.axpy(-c, u, 1.0);
                }
            }
            let norm = q.norm();
            if norm >= COLLAPSE_RANK_TOL * input_norm {
                new_span.push(q / norm);
            }
        }
        self.span = new_span;
        let projector = self.span_projector();

        self.x = &projector * &self.x;
        for rec in &mut self.records {
            let mut kept_dx = Vec::new();
            let mut kept_dg = Vec::new();
            for (dx, dg) in rec.dx.iter().zip(&rec.dg) {
                let ndx = &projector * dx;
                let ndg = &projector * dg;
                if ndx.norm() * REMAP_SHRINK_FACTOR >= dx.norm()
                    && ndg.norm() * REMAP_SHRINK_FACTOR >= dg.norm()
                {
                    kept_dx.push(ndx);
                    kept_dg.push(ndg);
                }
            }
            rec.dx = kept_dx;
            rec.dg = kept_dg;
            if let Some((p, g, _)) = &mut rec.last {
                *p = &projector * &*p;
                *g = &projector * &*g;
            }
            if let Some(model) = &mut rec.model {
                model.anchor = &projector * &model.anchor;
                model.gradient = &projector * &model.gradient;
                let h = &projector * &model.hessian * &projector;
                model.hessian = (&h + h.transpose()) * 0.5;
            }
        }
    }

    pub fn step<P: Objective + ?Sized>(&mut self, problem: &P) -> Result<(), SfoError> {
        let j = self.choose_subfunction();
        let agg = self.aggregate_hessian();
        let grad_g = self.summed_model_gradient(&self.x);
        let delta = self.solve_in_span(&agg, &grad_g);
        let proposed = &self.x - delta * self.eta;

        let eval = if proposed.iter().all(|v| v.is_finite()) {
            match problem.eval(j, &proposed) {
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
            Some(e) => {
                let rec = &self.records[j];
                match (&rec.last, &rec.model) {
                    (Some((_, _, last_value)), Some(model)) => {
                        e.value > *last_value && {
                            let overshoot = e.value - model.evaluate(&proposed);
                            let gain = self.summed_model_value(&self.x)
                                - self.summed_model_value(&proposed);
                            overshoot > gain
                        }
                    }
                    _ => false,
                }
            }
            None => true,
        };
        if bad {
            self.bad_update_count += 1;
        } else {
            self.x = proposed.clone();
        }

        if let Some(e) = &eval {
            if let Some(u) = self.try_extend_span(&e.gradient) {
                // Every model asserts its unexplored-direction curvature
                // along the new span direction, mirroring diagonal padding.
                for rec in &mut self.records {
                    if let Some(model) = &mut rec.model {
                        model.hessian += &u * u.transpose() * model.pad_curvature;
                    }
                }
            }
            self.records[j].push_evaluation(
                proposed.clone(),
                e.gradient.clone(),
                e.value,
                self.history_cap,
            );
            let (hessian, pad) = self.rebuild_hessian(j);
            self.records[j].model = Some(FullModel {
                anchor: proposed,
                value: e.value,
                gradient: e.gradient.clone(),
                hessian,
                pad_curvature: pad,
            });
        }

        if self.span.len() > self.k_max {
            self.collapse();
        }

        self.eta = if bad {
            eta_after_failure(self.eta)
        } else {
            eta_after_success(self.eta, self.active_count)
        };

        self.steps_since_growth += 1;
        if self.active_count < self.total_n {
            let agg = self.aggregate_hessian();
            let grow = bad
                || self.gradient_shrink_criterion(&agg)
                || self.steps_since_growth >= self.active_count;
            if grow {
                self.active_count += 1;
                self.steps_since_growth = 0;
            }
        }
        self.step_index += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::Sfo;
    use crate::problem::make_quadratic_ensemble;

    /// The coordinate-based optimizer and the full-space mirror walk the
    /// same trajectory, through expansions and collapses alike.
    #[test]
    fn mirrors_subspace_implementation_on_quadratics() {
        let problem = make_quadratic_ensemble(42, 30, 6, 30.0).unwrap();
        let config = SfoConfig::default();
        let mut fast = Sfo::new(&problem, config.clone()).unwrap();
        let mut slow = ReferenceSfo::new(&problem, &config).unwrap();
        for step in 0..60 {
            fast.step(&problem).unwrap();
            slow.step(&problem).unwrap();
            let a = fast.current_x();
            let b = slow.current_x();
            let err = (&a - b).norm() / b.norm().max(1.0);
            assert!(
                err <= 1e-6,
                "iterates diverged at step {step}: relative error {err}"
            );
            assert_eq!(
                fast.subspace().k(),
                slow.span_dim(),
                "span dims at step {step}"
            );
            assert_eq!(fast.active_count(), slow.active_count());
            assert_eq!(fast.bad_update_count(), slow.bad_update_count());
        }
        // Collapses must actually have happened for this test to examine
        // the remapping machinery (K_max = 18 < M = 30).
        assert!(slow.span_dim() <= 19);
    }
}
