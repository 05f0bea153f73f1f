//! Per-subfunction online Hessian estimation.
//!
//! Every subfunction keeps two matched column lists, `Δx` and `Δf′`, holding
//! the change in position and gradient between its successive evaluations
//! (at most [`DEFAULT_HISTORY_LEN`] pairs). Its curvature estimate is
//! rebuilt from scratch at every update by running the BFGS update equation
//! over those columns, oldest to newest, starting from `B₀ = β·I` with `β`
//! chosen from the history itself, and is then clamped positive definite by
//! an eigenvalue floor.
//!
//! All quantities are expressed in shared-subspace coordinates. Since every
//! history column lies in the span of at most `2L` directions, the chain and
//! the eigenvalue floor are computed inside that span and assembled back to
//! dense `K×K` form, which keeps the per-step cost at `O(K·L² + L³)` plus
//! the `O(K²L)` assembly instead of `O(K³)`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::optimizer::QuadraticModel;

/// History pairs retained per subfunction.
pub const DEFAULT_HISTORY_LEN: usize = 10;

/// Relative curvature threshold: a pair is stored only if
/// `ΔxᵀΔf′ > ε·‖Δx‖·‖Δf′‖`. The BFGS update divides by this inner product,
/// so non-positive-curvature pairs would break positive definiteness.
pub const EPS_CURVATURE: f64 = 1e-12;

/// Eigenvalues of `Q` below `NONZERO_EIG_REL · λ_max(Q)` count as zero when
/// choosing `β`.
pub const NONZERO_EIG_REL: f64 = 1e-12;

/// Scale of the identity Hessian assigned to the very first subfunction
/// before any curvature information exists.
pub const FIRST_EVER_HESSIAN_SCALE: f64 = 1e6;

/// A history pair is dropped at subspace collapse when either column's norm
/// shrinks by more than this factor: its information left the subspace.
pub const REMAP_SHRINK_FACTOR: f64 = 1e6;

#[derive(Debug, Error)]
pub enum HessianError {
    #[error("operation requires at least one stored history pair")]
    EmptyHistory,
    #[error("BFGS initial scale must be positive, got {0}")]
    NonPositiveBeta(f64),
    #[error("matrix is asymmetric beyond tolerance (max deviation {0:.3e})")]
    AsymmetricInput(f64),
}

/// The most recent evaluation of a subfunction, in subspace coordinates.
#[derive(Debug, Clone)]
pub struct LastEval {
    pub position: DVector<f64>,
    pub gradient: DVector<f64>,
    pub value: f64,
    /// Optimization step at which the evaluation happened (τᵢ).
    pub step_index: u64,
}

/// Per-subfunction state: the Δx/Δf′ history, the latest evaluation, and
/// the current quadratic model.
#[derive(Debug, Clone)]
pub struct SubfunctionRecord {
    dx: Vec<DVector<f64>>,
    dg: Vec<DVector<f64>>,
    last: Option<LastEval>,
    eval_count: u64,
    history_cap: usize,
    pub model: Option<QuadraticModel>,
}

impl Default for SubfunctionRecord {
    fn default() -> Self {
        Self::new(DEFAULT_HISTORY_LEN)
    }
}

impl SubfunctionRecord {
    pub fn new(history_cap: usize) -> Self {
        Self {
            dx: Vec::new(),
            dg: Vec::new(),
            last: None,
            eval_count: 0,
            history_cap: history_cap.max(1),
            model: None,
        }
    }

    pub fn eval_count(&self) -> u64 {
        self.eval_count
    }

    pub fn last(&self) -> Option<&LastEval> {
        self.last.as_ref()
    }

    pub fn history_len(&self) -> usize {
        self.dx.len()
    }

    /// Position-difference columns, oldest first.
    pub fn dx(&self) -> &[DVector<f64>] {
        &self.dx
    }

    /// Gradient-difference columns, oldest first.
    pub fn dg(&self) -> &[DVector<f64>] {
        &self.dg
    }

    /// Records a fresh evaluation. When a previous evaluation exists, the
    /// difference pair is appended to the history unless it fails the
    /// curvature condition (including the zero-Δx case, which is silently
    /// discarded); the oldest pair is dropped beyond the cap. Returns
    /// whether a pair was stored.
    pub fn push_evaluation(
        &mut self,
        position: DVector<f64>,
        gradient: DVector<f64>,
        value: f64,
        step_index: u64,
    ) -> bool {
        let appended = if let Some(last) = &self.last {
            let dx = &position - &last.position;
            let dg = &gradient - &last.gradient;
            let curvature = dx.dot(&dg);
            if curvature > EPS_CURVATURE * dx.norm() * dg.norm() && curvature > 0.0 {
                self.dx.push(dx);
                self.dg.push(dg);
                if self.dx.len() > self.history_cap {
                    self.dx.remove(0);
                    self.dg.remove(0);
                }
                true
            } else {
                false
            }
        } else {
            false
        };
        self.last = Some(LastEval {
            position,
            gradient,
            value,
            step_index,
        });
        self.eval_count += 1;
        appended
    }

    /// Extends all stored coordinate vectors (and the model, if any) with
    /// zeros after the subspace gained `extra` columns.
    pub fn pad(&mut self, extra: usize) {
        if extra == 0 {
            return;
        }
        let grow = |v: &mut DVector<f64>| {
            let mut out = DVector::zeros(v.len() + extra);
            out.rows_mut(0, v.len()).copy_from(v);
            *v = out;
        };
        for c in self.dx.iter_mut().chain(self.dg.iter_mut()) {
            grow(c);
        }
        if let Some(last) = &mut self.last {
            grow(&mut last.position);
            grow(&mut last.gradient);
        }
        if let Some(model) = &mut self.model {
            model.pad(extra);
        }
    }

    /// Maps all stored coordinates through the collapse projection `T`.
    /// History pairs whose columns collapse to a negligible remnant (norm
    /// shrunk by more than [`REMAP_SHRINK_FACTOR`]) are dropped: their
    /// information pointed outside the retained subspace.
    pub fn remap(&mut self, projection: &DMatrix<f64>) {
        let mut kept_dx = Vec::with_capacity(self.dx.len());
        let mut kept_dg = Vec::with_capacity(self.dg.len());
        for (dx, dg) in self.dx.iter().zip(&self.dg) {
            let ndx = projection * dx;
            let ndg = projection * dg;
            let survives = |new: &DVector<f64>, old: &DVector<f64>| {
                new.norm() * REMAP_SHRINK_FACTOR >= old.norm()
            };
            if survives(&ndx, dx) && survives(&ndg, dg) {
                kept_dx.push(ndx);
                kept_dg.push(ndg);
            }
        }
        self.dx = kept_dx;
        self.dg = kept_dg;
        if let Some(last) = &mut self.last {
            last.position = projection * &last.position;
            last.gradient = projection * &last.gradient;
        }
        if let Some(model) = &mut self.model {
            model.remap(projection);
        }
    }
}

/// A symmetric curvature estimate plus how many eigenvalues the last
/// positive-definiteness enforcement had to raise.
#[derive(Debug, Clone)]
pub struct HessianEstimate {
    pub matrix: DMatrix<f64>,
    pub clipped_eigenvalues: usize,
    /// The scale this estimate asserts along directions it carries no
    /// measurement for (the BFGS starting scale, after any enforcement).
    pub unexplored_curvature: f64,
}

/// Orthonormal basis (via twice-iterated Gram-Schmidt) for the span of the
/// given vectors, dropping directions below `1e-12` of the largest input.
fn span_basis<'a, I>(vectors: I, dim: usize) -> Vec<DVector<f64>>
where
    I: IntoIterator<Item = &'a DVector<f64>> + Clone,
{
    let largest = vectors
        .clone()
        .into_iter()
        .map(|v| v.norm())
        .fold(0.0f64, f64::max);
    let mut basis: Vec<DVector<f64>> = Vec::new();
    if largest == 0.0 {
        return basis;
    }
    for v in vectors {
        if basis.len() >= dim {
            break;
        }
        let mut q = v.clone();
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&q);
                q.axpy(-c, b, 1.0);
            }
        }
        let norm = q.norm();
        if norm > 1e-12 * largest {
            basis.push(q / norm);
        }
    }
    basis
}

fn project_onto(basis: &[DVector<f64>], v: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(basis.len(), basis.iter().map(|b| b.dot(v)))
}

/// Runs the BFGS update over the record's history columns in the span they
/// define, returning the final small matrix `S`, the basis `W`, and how many
/// pairs were skipped for failing the curvature guard after remapping.
fn small_chain(
    record: &SubfunctionRecord,
    beta: f64,
) -> Result<(Vec<DVector<f64>>, DMatrix<f64>), HessianError> {
    if record.history_len() == 0 {
        return Err(HessianError::EmptyHistory);
    }
    if !(beta > 0.0) {
        return Err(HessianError::NonPositiveBeta(beta));
    }
    let k = record.dx[0].len();
    let basis = span_basis(record.dx.iter().chain(record.dg.iter()), k);
    let r = basis.len();
    let mut s = DMatrix::identity(r, r) * beta;
    for (dx, dg) in record.dx.iter().zip(&record.dg) {
        let u = project_onto(&basis, dx);
        let v = project_onto(&basis, dg);
        let uv = u.dot(&v);
        let su = &s * &u;
        let usu = u.dot(&su);
        // Stored pairs passed the curvature condition at append time, but a
        // collapse remap can invalidate it; skip such pairs.
        if uv <= EPS_CURVATURE * u.norm() * v.norm() || usu <= 0.0 {
            continue;
        }
        s += &v * v.transpose() / uv;
        s -= &su * su.transpose() / usu;
    }
    s = (&s + s.transpose()) * 0.5;
    Ok((basis, s))
}

/// Assembles `β·I_K + W (S − β·I_r) Wᵀ` densely.
fn assemble(k: usize, beta: f64, basis: &[DVector<f64>], small: &DMatrix<f64>) -> DMatrix<f64> {
    let r = basis.len();
    let mut w = DMatrix::zeros(k, r);
    for (j, b) in basis.iter().enumerate() {
        w.set_column(j, b);
    }
    let mut inner = small.clone();
    for i in 0..r {
        inner[(i, i)] -= beta;
    }
    let mut out = &w * inner * w.transpose();
    for i in 0..k {
        out[(i, i)] += beta;
    }
    (&out + out.transpose()) * 0.5
}

/// Applies the BFGS update equation over the stored history, oldest to
/// newest, starting from `B₀ = β·I`. The result satisfies the most recent
/// secant equation `H·Δx = Δf′` exactly (whenever that pair passed the
/// curvature check) and is the subfunction's curvature estimate.
pub fn bfgs_chain(record: &SubfunctionRecord, beta: f64) -> Result<HessianEstimate, HessianError> {
    let k = record
        .dx
        .first()
        .map(|c| c.len())
        .ok_or(HessianError::EmptyHistory)?;
    let (basis, small) = small_chain(record, beta)?;
    Ok(HessianEstimate {
        matrix: assemble(k, beta, &basis, &small),
        clipped_eigenvalues: 0,
        unexplored_curvature: beta,
    })
}

/// Midpoint-convention median of an unsorted slice (mean of the two middle
/// values for even counts).
fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Chooses the BFGS starting scale `β` as the smallest nonzero eigenvalue of
/// `Q = [(Δx⁺)ᵀ Δf′ᵀ Δf′ Δx⁺]^{1/2}` — the symmetric matrix most consistent
/// with the squared secant equations of the whole history. `Q` is computed
/// inside the span of the history columns; eigenvalues at or below
/// [`NONZERO_EIG_REL`]`·λ_max` count as zero.
pub fn init_beta(record: &SubfunctionRecord) -> Result<f64, HessianError> {
    if record.history_len() == 0 {
        return Err(HessianError::EmptyHistory);
    }
    let k = record.dx[0].len();
    let m = record.history_len();
    let basis = span_basis(record.dx.iter().chain(record.dg.iter()), k);
    let r = basis.len();
    let mut x = DMatrix::zeros(r, m);
    let mut g = DMatrix::zeros(r, m);
    for (col, (dx, dg)) in record.dx.iter().zip(&record.dg).enumerate() {
        x.set_column(col, &project_onto(&basis, dx));
        g.set_column(col, &project_onto(&basis, dg));
    }
    let svd = x.clone().svd(true, true);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let x_pinv = svd
        .pseudo_inverse(1e-12 * sigma_max.max(f64::MIN_POSITIVE))
        .expect("SVD computed with both factors");
    let gtg = g.transpose() * &g;
    let mut q_sq = x_pinv.transpose() * gtg * &x_pinv;
    q_sq = (&q_sq + q_sq.transpose()) * 0.5;
    let eigen = q_sq.symmetric_eigen();
    // Eigenvalues of Q are the square roots of the eigenvalues of Q². A
    // rank-deficient Q² has round-off zeros of either sign at ~ε·μ_max;
    // clamp the whole round-off band to zero before the square root, which
    // would otherwise amplify ε·μ_max to the much larger √ε·λ_max.
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
        Ok(beta)
    } else {
        // Unreachable for histories that passed the curvature condition;
        // kept as a safe default for degenerate numerics.
        Ok(1.0)
    }
}

/// Hessian for a subfunction with exactly one evaluation: the identity
/// scaled by the median eigenvalue of the average of the other active
/// subfunctions' Hessians, or by [`FIRST_EVER_HESSIAN_SCALE`] when no other
/// subfunction has one yet.
pub fn initial_hessian_no_history(k: usize, others: &[&DMatrix<f64>]) -> HessianEstimate {
    let scale = if others.is_empty() {
        FIRST_EVER_HESSIAN_SCALE
    } else {
        let mut mean = DMatrix::zeros(k, k);
        for h in others {
            mean += *h;
        }
        mean /= others.len() as f64;
        mean = (&mean + mean.transpose()) * 0.5;
        let mut eigs: Vec<f64> = mean.symmetric_eigen().eigenvalues.iter().cloned().collect();
        median(&mut eigs)
    };
    HessianEstimate {
        matrix: DMatrix::identity(k, k) * scale,
        clipped_eigenvalues: 0,
        unexplored_curvature: scale,
    }
}

/// Raises every eigenvalue below `γ·λ_max` to the median of the strictly
/// positive eigenvalues (identity if there are none), returning the
/// reassembled matrix and the number of raised eigenvalues.
pub fn enforce_positive_definite(
    matrix: &DMatrix<f64>,
    gamma: f64,
) -> Result<HessianEstimate, HessianError> {
    let k = matrix.nrows();
    let scale = matrix.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    let asym = (matrix - matrix.transpose())
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    if asym > 1e-10 * scale {
        return Err(HessianError::AsymmetricInput(asym));
    }
    let sym = (matrix + matrix.transpose()) * 0.5;
    let eigen = sym.symmetric_eigen();
    let lambda_max = eigen.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut positives: Vec<f64> = eigen
        .eigenvalues
        .iter()
        .cloned()
        .filter(|&l| l > 0.0)
        .collect();
    let threshold = gamma * lambda_max;
    let mut adjusted = eigen.eigenvalues.clone();
    let mut clipped = 0;
    if positives.is_empty() {
        // No usable curvature anywhere; fall back to the identity.
        adjusted.fill(1.0);
        clipped = k;
    } else {
        let med = median(&mut positives);
        for l in adjusted.iter_mut() {
            if *l < threshold {
                *l = med;
                clipped += 1;
            }
        }
    }
    let rebuilt =
        &eigen.eigenvectors * DMatrix::from_diagonal(&adjusted) * eigen.eigenvectors.transpose();
    let floor = adjusted.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(HessianEstimate {
        matrix: (&rebuilt + rebuilt.transpose()) * 0.5,
        clipped_eigenvalues: clipped,
        unexplored_curvature: if floor.is_finite() { floor } else { 1.0 },
    })
}

/// BFGS chain plus positive-definiteness enforcement in one pass, computed
/// inside the history span: the full spectrum is the small-chain spectrum
/// plus `β` with multiplicity `K−r`, so the eigenvalue floor never needs a
/// dense `K×K` decomposition. Produces exactly what
/// [`enforce_positive_definite`] applied to [`bfgs_chain`] would.
pub fn rebuild_hessian(
    record: &SubfunctionRecord,
    beta: f64,
    gamma: f64,
) -> Result<HessianEstimate, HessianError> {
    let k = record
        .dx
        .first()
        .map(|c| c.len())
        .ok_or(HessianError::EmptyHistory)?;
    let (basis, small) = small_chain(record, beta)?;
    let r = basis.len();
    let eigen = small.symmetric_eigen();
    let outside = k - r;

    let lambda_max = eigen
        .eigenvalues
        .iter()
        .cloned()
        .fold(if outside > 0 { beta } else { f64::NEG_INFINITY }, f64::max);
    let mut positives: Vec<f64> = eigen
        .eigenvalues
        .iter()
        .cloned()
        .filter(|&l| l > 0.0)
        .collect();
    if beta > 0.0 {
        positives.extend(std::iter::repeat(beta).take(outside));
    }
    let threshold = gamma * lambda_max;
    let mut adjusted = eigen.eigenvalues.clone();
    let mut clipped = 0;
    let beta_eff;
    if positives.is_empty() {
        adjusted.fill(1.0);
        clipped = k;
        beta_eff = 1.0;
    } else {
        let med = median(&mut positives);
        for l in adjusted.iter_mut() {
            if *l < threshold {
                *l = med;
                clipped += 1;
            }
        }
        if outside > 0 && beta < threshold {
            beta_eff = med;
            clipped += outside;
        } else {
            beta_eff = beta;
        }
    }
    let small_fixed =
        &eigen.eigenvectors * DMatrix::from_diagonal(&adjusted) * eigen.eigenvectors.transpose();
    let small_fixed = (&small_fixed + small_fixed.transpose()) * 0.5;
    Ok(HessianEstimate {
        matrix: assemble(k, beta_eff, &basis, &small_fixed),
        clipped_eigenvalues: clipped,
        unexplored_curvature: beta_eff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn dvec(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn random_vector(rng: &mut ChaCha8Rng, len: usize) -> DVector<f64> {
        DVector::from_fn(len, |_, _| StandardNormal.sample(rng))
    }

    /// Literal dense BFGS update loop, used as an independent oracle for the
    /// span-based implementation.
    fn naive_dense_chain(record: &SubfunctionRecord, beta: f64) -> DMatrix<f64> {
        let k = record.dx()[0].len();
        let mut b = DMatrix::identity(k, k) * beta;
        for (dx, dg) in record.dx().iter().zip(record.dg()) {
            let uv = dg.dot(dx);
            let bu = &b * dx;
            let ubu = dx.dot(&bu);
            if uv <= EPS_CURVATURE * dx.norm() * dg.norm() || ubu <= 0.0 {
                continue;
            }
            b += dg * dg.transpose() / uv;
            b -= &bu * bu.transpose() / ubu;
        }
        b
    }

    fn record_with_pairs(pairs: &[(&[f64], &[f64])]) -> SubfunctionRecord {
        // Build a record whose successive evaluations produce the given
        // (Δx, Δf′) pairs exactly.
        let k = pairs[0].0.len();
        let mut rec = SubfunctionRecord::new(DEFAULT_HISTORY_LEN);
        let mut pos = DVector::zeros(k);
        let mut grad = DVector::zeros(k);
        rec.push_evaluation(pos.clone(), grad.clone(), 0.0, 0);
        for (step, (dx, dg)) in pairs.iter().enumerate() {
            pos += dvec(dx);
            grad += dvec(dg);
            rec.push_evaluation(pos.clone(), grad.clone(), 0.0, step as u64 + 1);
        }
        rec
    }

    #[test]
    fn history_records_differences() {
        // f = ½·3x²: gradient 3x, evaluated at x = 1 then x = 2.
        let mut rec = SubfunctionRecord::new(10);
        rec.push_evaluation(dvec(&[1.0]), dvec(&[3.0]), 1.5, 0);
        assert_eq!(rec.history_len(), 0);
        assert!(rec.push_evaluation(dvec(&[2.0]), dvec(&[6.0]), 6.0, 1));
        assert_eq!(rec.history_len(), 1);
        assert_eq!(rec.dx()[0][0], 1.0);
        assert_eq!(rec.dg()[0][0], 3.0);
        assert_eq!(rec.eval_count(), 2);
    }

    #[test]
    fn negative_curvature_pairs_are_discarded() {
        let mut rec = SubfunctionRecord::new(10);
        rec.push_evaluation(dvec(&[0.0]), dvec(&[0.0]), 0.0, 0);
        // Δx = 1, Δf′ = −1: curvature condition fails.
        assert!(!rec.push_evaluation(dvec(&[1.0]), dvec(&[-1.0]), 0.0, 1));
        assert_eq!(rec.history_len(), 0);
        // The last evaluation still advanced.
        assert_eq!(rec.last().unwrap().position[0], 1.0);
    }

    #[test]
    fn repeated_position_is_discarded_not_an_error() {
        let mut rec = SubfunctionRecord::new(10);
        rec.push_evaluation(dvec(&[1.0]), dvec(&[2.0]), 0.0, 0);
        assert!(!rec.push_evaluation(dvec(&[1.0]), dvec(&[2.5]), 0.0, 1));
        assert_eq!(rec.history_len(), 0);
    }

    #[test]
    fn history_truncates_to_cap() {
        let mut rec = SubfunctionRecord::new(10);
        let mut pos = 0.0;
        rec.push_evaluation(dvec(&[pos]), dvec(&[pos]), 0.0, 0);
        for step in 0..12 {
            pos += 1.0;
            rec.push_evaluation(dvec(&[pos]), dvec(&[pos]), 0.0, step + 1);
        }
        assert_eq!(rec.history_len(), 10);
        // Oldest two pairs (from positions 0→1 and 1→2) are gone; the oldest
        // retained column is the 2→3 difference, still unit sized.
        assert_eq!(rec.dx()[0][0], 1.0);
        assert_eq!(rec.eval_count(), 13);
    }

    #[test]
    fn chain_single_pair_closed_form() {
        // K = 2, B₀ = I, Δx = e₁, Δf′ = 2e₁ → B = diag(2, 1).
        let rec = record_with_pairs(&[(&[1.0, 0.0], &[2.0, 0.0])]);
        let h = bfgs_chain(&rec, 1.0).unwrap().matrix;
        let expect = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        assert!((h - expect).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn chain_recovers_quadratic_curvature_from_spanning_history() {
        // Conjugate steps against f(x) = ½xᵀAx give Δf′ = A·Δx, and BFGS
        // keeps every previous secant equation intact under conjugacy, so a
        // spanning history must reproduce A and satisfy all stored secants.
        let a = DMatrix::from_row_slice(
            3,
            3,
            &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0],
        );
        // A-orthogonalize the coordinate basis to get conjugate directions.
        let mut steps: Vec<DVector<f64>> = Vec::new();
        for i in 0..3 {
            let mut d = DVector::from_fn(3, |r, _| if r == i { 1.0 } else { 0.0 });
            for prev in &steps {
                let coef = prev.dot(&(&a * &d)) / prev.dot(&(&a * prev));
                d -= prev * coef;
            }
            steps.push(d);
        }
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = steps
            .iter()
            .map(|s| {
                let g = &a * s;
                (s.as_slice().to_vec(), g.as_slice().to_vec())
            })
            .collect();
        let borrowed: Vec<(&[f64], &[f64])> = pairs
            .iter()
            .map(|(x, g)| (x.as_slice(), g.as_slice()))
            .collect();
        let rec = record_with_pairs(&borrowed);
        let h = bfgs_chain(&rec, 1.0).unwrap().matrix;
        for (dx, dg) in rec.dx().iter().zip(rec.dg()) {
            let resid = (&h * dx - dg).norm();
            assert!(resid <= 1e-8 * dg.norm(), "secant residual {resid}");
        }
        // With a spanning conjugate history the chain reproduces A itself.
        assert!((&h - &a).iter().all(|v| v.abs() <= 1e-8));
    }

    #[test]
    fn chain_satisfies_most_recent_secant_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let mut rec = SubfunctionRecord::new(10);
            let k = 6;
            let mut pos = random_vector(&mut rng, k);
            let mut grad = random_vector(&mut rng, k);
            rec.push_evaluation(pos.clone(), grad.clone(), 0.0, 0);
            for step in 0..8 {
                let dx = random_vector(&mut rng, k);
                // Force positive curvature: align Δf′ with Δx plus noise.
                let mut dg = random_vector(&mut rng, k);
                let proj = dx.dot(&dg) / dx.dot(&dx);
                dg += &dx * (1.0 - proj.min(0.0)).max(0.5);
                pos += &dx;
                grad += &dg;
                rec.push_evaluation(pos.clone(), grad.clone(), 0.0, step + 1);
            }
            if rec.history_len() == 0 {
                continue;
            }
            let h = bfgs_chain(&rec, 2.5).unwrap().matrix;
            let dx = rec.dx().last().unwrap();
            let dg = rec.dg().last().unwrap();
            let resid = (&h * dx - dg).norm();
            assert!(resid <= 1e-10 * dg.norm().max(1.0), "residual {resid}");
        }
    }

    #[test]
    fn span_chain_matches_naive_dense_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..25 {
            let k = 12;
            let mut rec = SubfunctionRecord::new(10);
            let mut pos = random_vector(&mut rng, k);
            let mut grad = random_vector(&mut rng, k);
            rec.push_evaluation(pos.clone(), grad.clone(), 0.0, 0);
            for step in 0..6 {
                let dx = random_vector(&mut rng, k);
                let mut dg = random_vector(&mut rng, k) * 0.3;
                dg += &dx * 1.5;
                pos += &dx;
                grad += &dg;
                rec.push_evaluation(pos.clone(), grad.clone(), 0.0, step + 1);
            }
            let beta = 0.7;
            let fast = bfgs_chain(&rec, beta).unwrap().matrix;
            let slow = naive_dense_chain(&rec, beta);
            let scale = slow.iter().fold(1.0f64, |a, v| a.max(v.abs()));
            assert!(
                (&fast - &slow).iter().all(|v| v.abs() <= 1e-9 * scale),
                "span-based chain diverged from the dense oracle"
            );
        }
    }

    #[test]
    fn chain_rejects_bad_arguments() {
        let rec = SubfunctionRecord::new(10);
        assert!(matches!(
            bfgs_chain(&rec, 1.0),
            Err(HessianError::EmptyHistory)
        ));
        let rec = record_with_pairs(&[(&[1.0], &[1.0])]);
        assert!(matches!(
            bfgs_chain(&rec, 0.0),
            Err(HessianError::NonPositiveBeta(_))
        ));
    }

    #[test]
    fn beta_of_single_pair_is_secant_slope() {
        let rec = record_with_pairs(&[(&[1.0, 0.0], &[3.0, 0.0])]);
        assert_relative_eq!(init_beta(&rec).unwrap(), 3.0, max_relative = 1e-12);
    }

    #[test]
    fn beta_of_orthogonal_pairs_is_smallest_slope() {
        let rec = record_with_pairs(&[
            (&[1.0, 0.0], &[2.0, 0.0]),
            (&[0.0, 1.0], &[0.0, 5.0]),
        ]);
        assert_relative_eq!(init_beta(&rec).unwrap(), 2.0, max_relative = 1e-10);
    }

    #[test]
    fn beta_matches_dense_eigensolve_of_assembled_q() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = 12;
        let mut rec = SubfunctionRecord::new(10);
        let mut pos = random_vector(&mut rng, k);
        let mut grad = random_vector(&mut rng, k);
        rec.push_evaluation(pos.clone(), grad.clone(), 0.0, 0);
        for step in 0..4 {
            let dx = random_vector(&mut rng, k);
            let mut dg = random_vector(&mut rng, k) * 0.2;
            dg += &dx;
            pos += &dx;
            grad += &dg;
            rec.push_evaluation(pos.clone(), grad.clone(), 0.0, step + 1);
        }
        assert_eq!(rec.history_len(), 4);
        let fast = init_beta(&rec).unwrap();

        // Dense oracle: assemble Q in the full K-dimensional space.
        let m = rec.history_len();
        let mut x = DMatrix::zeros(k, m);
        let mut g = DMatrix::zeros(k, m);
        for (col, (dx, dg)) in rec.dx().iter().zip(rec.dg()).enumerate() {
            x.set_column(col, dx);
            g.set_column(col, dg);
        }
        let svd = x.clone().svd(true, true);
        let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
        let x_pinv = svd.pseudo_inverse(1e-12 * smax).unwrap();
        let q_sq = x_pinv.transpose() * g.transpose() * &g * &x_pinv;
        let q_sq = (&q_sq + q_sq.transpose()) * 0.5;
        let eigen = q_sq.symmetric_eigen();
        let mu_max = eigen.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let lambdas: Vec<f64> = eigen
            .eigenvalues
            .iter()
            .map(|&mu| if mu > 1e-14 * mu_max { mu.sqrt() } else { 0.0 })
            .collect();
        let lmax = lambdas.iter().cloned().fold(0.0f64, f64::max);
        let dense = lambdas
            .iter()
            .cloned()
            .filter(|&l| l > 1e-12 * lmax)
            .fold(f64::INFINITY, f64::min);
        assert_relative_eq!(fast, dense, max_relative = 1e-8);
    }

    #[test]
    fn beta_is_invariant_under_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = 6;
        let gauss: DMatrix<f64> = DMatrix::from_fn(k, k, |_, _| StandardNormal.sample(&mut rng));
        let rot = gauss.qr().q();
        let mut rec = SubfunctionRecord::new(10);
        let mut rec_rot = SubfunctionRecord::new(10);
        let mut pos = DVector::zeros(k);
        let mut grad = DVector::zeros(k);
        rec.push_evaluation(pos.clone(), grad.clone(), 0.0, 0);
        rec_rot.push_evaluation(&rot * &pos, &rot * &grad, 0.0, 0);
        for step in 0..5 {
            let dx = random_vector(&mut rng, k);
            let dg = &dx * 1.3 + random_vector(&mut rng, k) * 0.1;
            pos += &dx;
            grad += &dg;
            rec.push_evaluation(pos.clone(), grad.clone(), 0.0, step + 1);
            rec_rot.push_evaluation(&rot * &pos, &rot * &grad, 0.0, step + 1);
        }
        let b1 = init_beta(&rec).unwrap();
        let b2 = init_beta(&rec_rot).unwrap();
        assert_relative_eq!(b1, b2, max_relative = 1e-8);
    }

    #[test]
    fn no_history_first_subfunction_gets_large_identity() {
        let est = initial_hessian_no_history(2, &[]);
        assert_eq!(est.matrix, DMatrix::identity(2, 2) * 1e6);
    }

    #[test]
    fn no_history_uses_median_eigenvalue_of_mean() {
        let h = DMatrix::from_diagonal(&dvec(&[1.0, 4.0, 9.0]));
        let est = initial_hessian_no_history(3, &[&h]);
        assert!((est.matrix - DMatrix::identity(3, 3) * 4.0)
            .iter()
            .all(|v| v.abs() < 1e-10));

        let h2 = DMatrix::from_diagonal(&dvec(&[1.0, 4.0]));
        let est2 = initial_hessian_no_history(2, &[&h2]);
        assert!((est2.matrix - DMatrix::identity(2, 2) * 2.5)
            .iter()
            .all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn enforcement_raises_small_eigenvalues_to_median_positive() {
        let h = DMatrix::from_diagonal(&dvec(&[4.0, 1.0, -0.5]));
        let est = enforce_positive_definite(&h, 1e-8).unwrap();
        let expect = DMatrix::from_diagonal(&dvec(&[4.0, 1.0, 2.5]));
        assert!((est.matrix - expect).iter().all(|v| v.abs() < 1e-12));
        assert_eq!(est.clipped_eigenvalues, 1);
    }

    #[test]
    fn enforcement_leaves_healthy_matrices_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gauss: DMatrix<f64> = DMatrix::from_fn(4, 4, |_, _| StandardNormal.sample(&mut rng));
        let spd = &gauss * gauss.transpose() + DMatrix::identity(4, 4);
        let est = enforce_positive_definite(&spd, 1e-8).unwrap();
        let scale = spd.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        assert!((est.matrix - &spd).iter().all(|v| v.abs() <= 1e-12 * scale));
        assert_eq!(est.clipped_eigenvalues, 0);
    }

    #[test]
    fn enforcement_falls_back_to_identity_when_nothing_positive() {
        let h = DMatrix::from_diagonal(&dvec(&[-1.0, -2.0, -3.0]));
        let est = enforce_positive_definite(&h, 1e-8).unwrap();
        assert!((est.matrix - DMatrix::identity(3, 3))
            .iter()
            .all(|v| v.abs() < 1e-12));
        assert_eq!(est.clipped_eigenvalues, 3);
    }

    #[test]
    fn enforcement_rejects_asymmetric_input() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.5, 1.0]);
        assert!(matches!(
            enforce_positive_definite(&h, 1e-8),
            Err(HessianError::AsymmetricInput(_))
        ));
    }

    #[test]
    fn fused_rebuild_matches_chain_then_enforcement() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..25 {
            let k = 9;
            let mut rec = SubfunctionRecord::new(10);
            let mut pos = random_vector(&mut rng, k);
            let mut grad = random_vector(&mut rng, k);
            rec.push_evaluation(pos.clone(), grad.clone(), 0.0, 0);
            for step in 0..(2 + trial % 5) {
                let dx = random_vector(&mut rng, k);
                let mut dg = random_vector(&mut rng, k) * 0.4;
                dg += &dx * (0.5 + 0.1 * step as f64);
                pos += &dx;
                grad += &dg;
                rec.push_evaluation(pos.clone(), grad.clone(), 0.0, step as u64 + 1);
            }
            if rec.history_len() == 0 {
                continue;
            }
            let beta = 0.05;
            let gamma = 1e-8;
            let fused = rebuild_hessian(&rec, beta, gamma).unwrap();
            let two_step =
                enforce_positive_definite(&bfgs_chain(&rec, beta).unwrap().matrix, gamma).unwrap();
            let scale = two_step.matrix.iter().fold(1.0f64, |a, v| a.max(v.abs()));
            assert!(
                (&fused.matrix - &two_step.matrix)
                    .iter()
                    .all(|v| v.abs() <= 1e-9 * scale),
                "fused rebuild diverged from chain+enforce"
            );
            assert_eq!(fused.clipped_eigenvalues, two_step.clipped_eigenvalues);
            // The result must be positive definite.
            let min_eig = fused
                .matrix
                .clone()
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            assert!(min_eig > 0.0);
        }
    }

    #[test]
    fn pad_extends_everything_with_zeros() {
        let mut rec = record_with_pairs(&[(&[1.0, 0.0], &[2.0, 0.0])]);
        rec.pad(2);
        assert_eq!(rec.dx()[0].len(), 4);
        assert_eq!(rec.dx()[0][2], 0.0);
        assert_eq!(rec.last().unwrap().position.len(), 4);
    }

    #[test]
    fn remap_drops_pairs_that_leave_the_subspace() {
        let mut rec = record_with_pairs(&[
            (&[1.0, 0.0], &[2.0, 0.0]),
            (&[0.0, 1.0], &[0.0, 3.0]),
        ]);
        assert_eq!(rec.history_len(), 2);
        // Project onto the first coordinate only: the second pair vanishes.
        let t = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        rec.remap(&t);
        assert_eq!(rec.history_len(), 1);
        assert_eq!(rec.dx()[0].len(), 1);
        assert_eq!(rec.dx()[0][0], 1.0);
    }
}
