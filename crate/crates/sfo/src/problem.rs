//! Objective-function interface and built-in test problems.
//!
//! An objective is a sum of `N` differentiable subfunctions over an
//! `M`-dimensional parameter vector: `F(x) = Σᵢ fᵢ(x)`. Optimizers only ever
//! evaluate one subfunction at a time through [`Objective::eval`]; the full
//! objective is the ascending-index sum provided by
//! [`Objective::full_objective`].
//!
//! Two deterministic problem families are built in: a random ensemble of
//! positive-definite quadratics with a known minimizer
//! ([`make_quadratic_ensemble`]) and an L2-regularized logistic regression on
//! synthetic separable-plus-noise data ([`make_logistic_regression`]).
//! [`check_gradient`] verifies any evaluator against central finite
//! differences.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

/// Errors arising from problem construction or evaluation.
#[derive(Debug, Error)]
pub enum ProblemError {
    /// Subfunction index outside `0..N`.
    #[error("subfunction index {index} out of range (subfunction count {count})")]
    IndexOutOfRange { index: usize, count: usize },
    /// Parameter vector length does not match the problem dimension.
    #[error("parameter vector has length {got}, expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    /// Parameter vector contains NaN or infinite entries.
    #[error("parameter vector contains non-finite entries")]
    NonFiniteInput,
    /// Evaluation produced a NaN or infinite value or gradient. Optimizers
    /// treat this as a failed update rather than a hard error.
    #[error("evaluation produced a non-finite value or gradient")]
    NonFiniteOutput,
    /// Invalid constructor arguments.
    #[error("invalid problem configuration: {0}")]
    InvalidConfig(String),
    /// Filesystem failure while dumping a dataset.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// One subfunction evaluation: value and gradient at a point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: DVector<f64>,
}

/// An objective function expressed as a sum of `N` differentiable
/// subfunctions over `M` parameters.
///
/// Evaluators must be pure and deterministic: identical `(i, x)` inputs
/// yield bit-identical outputs, and evaluation never mutates the problem.
/// All implementations are `Send + Sync` so independent runs can share one
/// problem across threads.
pub trait Objective: Send + Sync {
    /// Number of parameters `M`.
    fn dimension(&self) -> usize;

    /// Number of subfunctions `N`.
    fn subfunction_count(&self) -> usize;

    /// Evaluate subfunction `i` at `x`, returning `fᵢ(x)` and `fᵢ′(x)`.
    fn eval(&self, i: usize, x: &DVector<f64>) -> Result<Evaluation, ProblemError>;

    /// The exact or derived optimum `(x*, F(x*))`, when known.
    fn analytic_optimum(&self) -> Option<(&DVector<f64>, f64)> {
        None
    }

    /// Full objective `F(x) = Σᵢ fᵢ(x)` and its gradient, accumulated in
    /// ascending subfunction order so results are reproducible.
    fn full_objective(&self, x: &DVector<f64>) -> Result<Evaluation, ProblemError> {
        let mut value = 0.0;
        let mut gradient = DVector::zeros(self.dimension());
        for i in 0..self.subfunction_count() {
            let e = self.eval(i, x)?;
            value += e.value;
            gradient += &e.gradient;
        }
        Ok(Evaluation { value, gradient })
    }
}

fn validate_input<P: Objective + ?Sized>(
    problem: &P,
    i: usize,
    x: &DVector<f64>,
) -> Result<(), ProblemError> {
    if i >= problem.subfunction_count() {
        return Err(ProblemError::IndexOutOfRange {
            index: i,
            count: problem.subfunction_count(),
        });
    }
    if x.len() != problem.dimension() {
        return Err(ProblemError::DimensionMismatch {
            got: x.len(),
            expected: problem.dimension(),
        });
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(ProblemError::NonFiniteInput);
    }
    Ok(())
}

fn validate_output(value: f64, gradient: &DVector<f64>) -> Result<(), ProblemError> {
    if !value.is_finite() || !gradient.iter().all(|v| v.is_finite()) {
        return Err(ProblemError::NonFiniteOutput);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Quadratic ensemble
// ---------------------------------------------------------------------------

/// An ensemble of positive-definite quadratic subfunctions
/// `fᵢ(x) = ½ (x − cᵢ)ᵀ Aᵢ (x − cᵢ)` with a known global minimizer.
#[derive(Debug, Clone)]
pub struct QuadraticEnsemble {
    matrices: Vec<DMatrix<f64>>,
    centers: Vec<DVector<f64>>,
    optimum: DVector<f64>,
    optimum_value: f64,
}

impl QuadraticEnsemble {
    /// Builds an ensemble from explicit `(Aᵢ, cᵢ)` pairs. Each `Aᵢ` must be
    /// symmetric positive definite; the minimizer `x* = (ΣAᵢ)⁻¹ ΣAᵢcᵢ` is
    /// solved for and stored.
    pub fn from_parts(
        matrices: Vec<DMatrix<f64>>,
        centers: Vec<DVector<f64>>,
    ) -> Result<Self, ProblemError> {
        if matrices.is_empty() || matrices.len() != centers.len() {
            return Err(ProblemError::InvalidConfig(
                "need one center per matrix, at least one subfunction".into(),
            ));
        }
        let m = matrices[0].nrows();
        for (a, c) in matrices.iter().zip(&centers) {
            if a.nrows() != m || a.ncols() != m || c.len() != m {
                return Err(ProblemError::InvalidConfig(
                    "inconsistent dimensions across subfunctions".into(),
                ));
            }
        }
        let mut total = DMatrix::zeros(m, m);
        let mut rhs = DVector::zeros(m);
        for (a, c) in matrices.iter().zip(&centers) {
            total += a;
            rhs += a * c;
        }
        let chol = total
            .clone()
            .cholesky()
            .ok_or_else(|| ProblemError::InvalidConfig("ΣAᵢ is not positive definite".into()))?;
        let optimum = chol.solve(&rhs);
        let mut optimum_value = 0.0;
        for (a, c) in matrices.iter().zip(&centers) {
            let d = &optimum - c;
            optimum_value += 0.5 * d.dot(&(a * &d));
        }
        Ok(Self {
            matrices,
            centers,
            optimum,
            optimum_value,
        })
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.matrices
    }

    pub fn centers(&self) -> &[DVector<f64>] {
        &self.centers
    }
}

impl Objective for QuadraticEnsemble {
    fn dimension(&self) -> usize {
        self.centers[0].len()
    }

    fn subfunction_count(&self) -> usize {
        self.matrices.len()
    }

    fn eval(&self, i: usize, x: &DVector<f64>) -> Result<Evaluation, ProblemError> {
        validate_input(self, i, x)?;
        let d = x - &self.centers[i];
        let ad = &self.matrices[i] * &d;
        let value = 0.5 * d.dot(&ad);
        validate_output(value, &ad)?;
        Ok(Evaluation {
            value,
            gradient: ad,
        })
    }

    fn analytic_optimum(&self) -> Option<(&DVector<f64>, f64)> {
        Some((&self.optimum, self.optimum_value))
    }
}

fn standard_normal_vector(rng: &mut ChaCha8Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| StandardNormal.sample(rng))
}

fn random_orthogonal(rng: &mut ChaCha8Rng, m: usize) -> DMatrix<f64> {
    let gauss = DMatrix::from_fn(m, m, |_, _| StandardNormal.sample(rng));
    gauss.qr().q()
}

/// Generates a seeded ensemble of `n` quadratics in `m` dimensions whose
/// eigenvalue spectra span `[1, condition_number]` geometrically, each in a
/// random orthogonal eigenbasis, with standard-normal centers.
pub fn make_quadratic_ensemble(
    seed: u64,
    m: usize,
    n: usize,
    condition_number: f64,
) -> Result<QuadraticEnsemble, ProblemError> {
    if m == 0 || n == 0 {
        return Err(ProblemError::InvalidConfig(
            "dimension and subfunction count must be positive".into(),
        ));
    }
    if !(condition_number >= 1.0) {
        return Err(ProblemError::InvalidConfig(
            "condition number must be >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut matrices = Vec::with_capacity(n);
    let mut centers = Vec::with_capacity(n);
    for _ in 0..n {
        let basis = random_orthogonal(&mut rng, m);
        let spectrum = DVector::from_fn(m, |k, _| {
            if m == 1 {
                1.0
            } else {
                condition_number.powf(k as f64 / (m as f64 - 1.0))
            }
        });
        let scaled = &basis * DMatrix::from_diagonal(&spectrum);
        let mut a = &scaled * basis.transpose();
        // Symmetrize away the last bits of round-off.
        a = (&a + a.transpose()) * 0.5;
        matrices.push(a);
        centers.push(standard_normal_vector(&mut rng, m));
    }
    QuadraticEnsemble::from_parts(matrices, centers)
}

// ---------------------------------------------------------------------------
// Logistic regression on synthetic data
// ---------------------------------------------------------------------------

/// A labeled dataset partitioned into minibatches.
///
/// Every sample belongs to exactly one minibatch and minibatch sizes differ
/// by at most one (round-robin assignment).
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    /// `D × feature_dim` sample matrix, one sample per row.
    pub features: DMatrix<f64>,
    /// Labels in `{-1, +1}`, one per sample.
    pub labels: Vec<f64>,
    /// Minibatch index of each sample.
    pub assignment: Vec<usize>,
    /// Number of minibatches.
    pub minibatch_count: usize,
}

impl DatasetSplit {
    /// Round-robin split of a dataset into `n` minibatches.
    pub fn round_robin(
        features: DMatrix<f64>,
        labels: Vec<f64>,
        n: usize,
    ) -> Result<Self, ProblemError> {
        let d = features.nrows();
        if labels.len() != d {
            return Err(ProblemError::InvalidConfig(
                "label count must match sample count".into(),
            ));
        }
        if n == 0 || d < n {
            return Err(ProblemError::InvalidConfig(format!(
                "need at least one sample per minibatch (D = {d}, N = {n})"
            )));
        }
        let assignment = (0..d).map(|s| s % n).collect();
        Ok(Self {
            features,
            labels,
            assignment,
            minibatch_count: n,
        })
    }

    /// Sample indices belonging to minibatch `i`.
    pub fn batch_indices(&self, i: usize) -> Vec<usize> {
        (0..self.features.nrows())
            .filter(|s| self.assignment[*s] == i)
            .collect()
    }

    /// Writes the dataset as CSV, one sample per row with the label in the
    /// last column.
    pub fn dump_csv(&self, path: &std::path::Path) -> Result<(), ProblemError> {
        let mut writer = csv::Writer::from_path(path).map_err(std::io::Error::from)?;
        let dim = self.features.ncols();
        let mut header: Vec<String> = (0..dim).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        writer.write_record(&header).map_err(std::io::Error::from)?;
        for s in 0..self.features.nrows() {
            let mut row: Vec<String> = (0..dim)
                .map(|j| format!("{:.17e}", self.features[(s, j)]))
                .collect();
            row.push(format!("{}", self.labels[s]));
            writer.write_record(&row).map_err(std::io::Error::from)?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// L2-regularized logistic regression, one subfunction per minibatch.
///
/// Subfunction `i` is the mean log-loss over its minibatch plus
/// `(l2 / N)‖x‖²`, so the full objective carries a total penalty of
/// `l2‖x‖²` and hyperparameter ranges do not depend on `N`.
#[derive(Debug, Clone)]
pub struct LogisticRegression {
    split: DatasetSplit,
    batches: Vec<Vec<usize>>,
    l2: f64,
    optimum: Option<(DVector<f64>, f64)>,
}

impl LogisticRegression {
    pub fn new(split: DatasetSplit, l2: f64) -> Result<Self, ProblemError> {
        if l2 < 0.0 || !l2.is_finite() {
            return Err(ProblemError::InvalidConfig(
                "l2 coefficient must be finite and non-negative".into(),
            ));
        }
        let batches = (0..split.minibatch_count)
            .map(|i| split.batch_indices(i))
            .collect();
        Ok(Self {
            split,
            batches,
            l2,
            optimum: None,
        })
    }

    pub fn dataset(&self) -> &DatasetSplit {
        &self.split
    }

    pub fn l2_coefficient(&self) -> f64 {
        self.l2
    }

    /// Locates the global minimum by deterministic full-batch first-order
    /// descent (gradient steps with momentum chosen from the strong-convexity
    /// bound `μ = 2·l2`) until `‖∇F‖ ≤ tol`, and stores it so
    /// [`Objective::analytic_optimum`] reports it.
    ///
    /// Requires `l2 > 0` so the objective is strongly convex.
    pub fn derive_optimum(&mut self, tol: f64, max_iters: usize) -> Result<(), ProblemError> {
        if self.l2 <= 0.0 {
            return Err(ProblemError::InvalidConfig(
                "deriving the optimum requires l2 > 0".into(),
            ));
        }
        let dim = self.dimension();
        // Global curvature bound: the logistic term's Hessian is at most
        // ZᵀZ/(4·S_min) summed over batches, the penalty adds exactly 2·l2.
        let s_min = self
            .batches
            .iter()
            .map(|b| b.len())
            .min()
            .expect("at least one batch");
        let z = &self.split.features;
        let mut v = DVector::from_element(dim, 1.0 / (dim as f64).sqrt());
        let mut lambda_max = 1.0;
        for _ in 0..60 {
            let w = z.transpose() * (z * &v);
            lambda_max = w.norm();
            if lambda_max == 0.0 {
                break;
            }
            v = w / lambda_max;
        }
        let lipschitz = lambda_max / (4.0 * s_min as f64) + 2.0 * self.l2;
        let mu = 2.0 * self.l2;
        let kappa = lipschitz / mu;
        let momentum = (kappa.sqrt() - 1.0) / (kappa.sqrt() + 1.0);
        let step = 1.0 / lipschitz;

        let mut x = DVector::zeros(dim);
        let mut x_prev = x.clone();
        for _ in 0..max_iters {
            let y = &x + (&x - &x_prev) * momentum;
            let g_y = self.full_objective(&y)?.gradient;
            let x_next = y - g_y * step;
            x_prev = x;
            x = x_next;
            let g_x = self.full_objective(&x)?.gradient;
            if g_x.norm() <= tol {
                let value = self.full_objective(&x)?.value;
                self.optimum = Some((x, value));
                return Ok(());
            }
        }
        Err(ProblemError::InvalidConfig(format!(
            "descent did not reach gradient norm {tol} within {max_iters} iterations"
        )))
    }
}

/// Numerically stable `ln(1 + exp(u))`.
fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

/// Numerically stable logistic sigmoid.
fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

impl Objective for LogisticRegression {
    fn dimension(&self) -> usize {
        self.split.features.ncols()
    }

    fn subfunction_count(&self) -> usize {
        self.split.minibatch_count
    }

    fn eval(&self, i: usize, x: &DVector<f64>) -> Result<Evaluation, ProblemError> {
        validate_input(self, i, x)?;
        let batch = &self.batches[i];
        let scale = 1.0 / batch.len() as f64;
        let n = self.subfunction_count() as f64;
        let mut value = 0.0;
        let mut gradient = DVector::zeros(x.len());
        for &s in batch {
            let z = self.split.features.row(s);
            let dot: f64 = z.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
            let margin = self.split.labels[s] * dot;
            value += softplus(-margin) * scale;
            // d/dx softplus(-y·zᵀx) = -y·σ(-y·zᵀx)·z
            let w = -self.split.labels[s] * sigmoid(-margin) * scale;
            gradient
                .iter_mut()
                .zip(z.iter())
                .for_each(|(g, zj)| *g += w * zj);
        }
        let penalty = self.l2 / n;
        value += penalty * x.dot(x);
        gradient += x * (2.0 * penalty);
        validate_output(value, &gradient)?;
        Ok(Evaluation { value, gradient })
    }

    fn analytic_optimum(&self) -> Option<(&DVector<f64>, f64)> {
        self.optimum.as_ref().map(|(x, v)| (x, *v))
    }
}

/// Generates a seeded logistic-regression problem on synthetic data: `d`
/// standard-normal samples in `feature_dim` dimensions, labeled by a random
/// ground-truth hyperplane with 10% of labels flipped, split round-robin
/// into `n` minibatches.
pub fn make_logistic_regression(
    seed: u64,
    d: usize,
    feature_dim: usize,
    n: usize,
    l2_coefficient: f64,
) -> Result<LogisticRegression, ProblemError> {
    if feature_dim == 0 {
        return Err(ProblemError::InvalidConfig(
            "feature dimension must be positive".into(),
        ));
    }
    if n == 0 || d < n {
        return Err(ProblemError::InvalidConfig(format!(
            "need at least one sample per minibatch (D = {d}, N = {n})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = DMatrix::from_fn(d, feature_dim, |_, _| StandardNormal.sample(&mut rng));
    // Hyperplane norm 1.5 keeps a sizable fraction of samples near the
    // decision boundary, so the optimum sits at moderate ‖x‖ and the
    // problem is neither trivially separable nor degenerate.
    let hyperplane = {
        let g = standard_normal_vector(&mut rng, feature_dim);
        let norm = g.norm();
        if norm > 0.0 {
            g * (1.5 / norm)
        } else {
            DVector::from_element(feature_dim, 1.5 / (feature_dim as f64).sqrt())
        }
    };
    let labels: Vec<f64> = (0..d)
        .map(|s| {
            let margin: f64 = features
                .row(s)
                .iter()
                .zip(hyperplane.iter())
                .map(|(a, b)| a * b)
                .sum();
            let clean = if margin >= 0.0 { 1.0 } else { -1.0 };
            let flip: f64 = rng.gen();
            if flip < 0.1 {
                -clean
            } else {
                clean
            }
        })
        .collect();
    let split = DatasetSplit::round_robin(features, labels, n)?;
    LogisticRegression::new(split, l2_coefficient)
}

// ---------------------------------------------------------------------------
// Cheap quadratic for overhead measurement
// ---------------------------------------------------------------------------

/// A deliberately cheap convex problem whose evaluation is a single pass
/// over `x`, used to measure optimizer overhead in isolation:
///
/// `fᵢ(x) = ½ cᵢ‖x‖² + ½ xᵀ rotᵣᵢ(x) − sᵢ·x[bᵢ]`
///
/// The circular-shift coupling term gives every subfunction a dense
/// Hessian (`cᵢI` plus a circulant with eigenvalues `cos θ`), so gradients
/// keep exploring new directions and the optimizer's subspace machinery
/// (expansion, collapse) stays exercised at full-size state — while the
/// evaluation itself stores only O(1) data per subfunction.
#[derive(Debug, Clone)]
pub struct CheapQuadratic {
    dimension: usize,
    scales: Vec<f64>,
    rotations: Vec<usize>,
    shift_index: Vec<usize>,
    shift_value: Vec<f64>,
}

impl CheapQuadratic {
    pub fn new(dimension: usize, n: usize) -> Result<Self, ProblemError> {
        if dimension == 0 || n == 0 {
            return Err(ProblemError::InvalidConfig(
                "dimension and subfunction count must be positive".into(),
            ));
        }
        Ok(Self {
            dimension,
            // c > 1 keeps cI + ½(S + Sᵀ) positive definite (the coupling
            // term's eigenvalues lie in [−1, 1]).
            scales: (0..n).map(|i| 1.5 + i as f64 / n as f64).collect(),
            rotations: (0..n).map(|i| 1 + i % 5).collect(),
            shift_index: (0..n).map(|i| (7 * i) % dimension).collect(),
            shift_value: (0..n).map(|i| 1.0 + (i % 7) as f64).collect(),
        })
    }
}

impl Objective for CheapQuadratic {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn subfunction_count(&self) -> usize {
        self.scales.len()
    }

    fn eval(&self, i: usize, x: &DVector<f64>) -> Result<Evaluation, ProblemError> {
        validate_input(self, i, x)?;
        let m = self.dimension;
        let c = self.scales[i];
        let r = self.rotations[i] % m;
        let b = self.shift_index[i];
        let s = self.shift_value[i];
        let mut value = 0.5 * c * x.dot(x) - s * x[b];
        let mut gradient = x * c;
        gradient[b] -= s;
        for j in 0..m {
            let jr = (j + r) % m;
            value += 0.5 * x[j] * x[jr];
            // d/dx of ½xᵀSx is ½(S + Sᵀ)x.
            gradient[j] += 0.5 * x[jr];
            gradient[jr] += 0.5 * x[j];
        }
        Ok(Evaluation { value, gradient })
    }
}

// ---------------------------------------------------------------------------
// Gradient checking and minibatch sizing
// ---------------------------------------------------------------------------

/// Wraps an objective and counts subfunction evaluations, so the harness —
/// not the optimizers — owns effective-pass accounting. Calls that go
/// through the wrapper are counted; diagnostics computed on the inner
/// problem (trace sampling of the full objective) are not.
pub struct CountingObjective<'a, P: Objective + ?Sized> {
    inner: &'a P,
    count: std::sync::atomic::AtomicU64,
}

impl<'a, P: Objective + ?Sized> CountingObjective<'a, P> {
    pub fn new(inner: &'a P) -> Self {
        Self {
            inner,
            count: std::sync::atomic::AtomicU64::new(0),
        }
    }

    pub fn inner(&self) -> &P {
        self.inner
    }

    /// Subfunction evaluations made through this wrapper so far.
    pub fn evaluations(&self) -> u64 {
        self.count.load(std::sync::atomic::Ordering::Relaxed)
    }

    /// Evaluations divided by the subfunction count: the cross-optimizer
    /// work axis.
    pub fn effective_passes(&self) -> f64 {
        self.evaluations() as f64 / self.inner.subfunction_count() as f64
    }
}

impl<P: Objective + ?Sized> Objective for CountingObjective<'_, P> {
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn subfunction_count(&self) -> usize {
        self.inner.subfunction_count()
    }

    fn eval(&self, i: usize, x: &DVector<f64>) -> Result<Evaluation, ProblemError> {
        self.count
            .fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        self.inner.eval(i, x)
    }

    fn analytic_optimum(&self) -> Option<(&DVector<f64>, f64)> {
        self.inner.analytic_optimum()
    }
}

/// Compares the analytic gradient of subfunction `i` at `x` against central
/// finite differences with the given step, returning the maximum per
/// coordinate relative error (`|fd − g| / max(1, |fd|, |g|)`).
pub fn check_gradient<P: Objective + ?Sized>(
    problem: &P,
    i: usize,
    x: &DVector<f64>,
    step: f64,
) -> Result<f64, ProblemError> {
    if !(step > 0.0) {
        return Err(ProblemError::InvalidConfig(
            "finite-difference step must be positive".into(),
        ));
    }
    let analytic = problem.eval(i, x)?.gradient;
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for k in 0..x.len() {
        probe[k] = x[k] + step;
        let plus = problem.eval(i, &probe)?.value;
        probe[k] = x[k] - step;
        let minus = problem.eval(i, &probe)?.value;
        probe[k] = x[k];
        let fd = (plus - minus) / (2.0 * step);
        let denom = 1.0f64.max(fd.abs()).max(analytic[k].abs());
        worst = worst.max((fd - analytic[k]).abs() / denom);
    }
    Ok(worst)
}

/// Suggests a minibatch count `N = clamp(round(p·√D), 1, D)` for a dataset
/// of `d` samples.
///
/// Rationale: with `N` minibatches of size `S = D/N`, a subfunction
/// evaluation costs `O(MS)` while the optimizer's subspace projections cost
/// `O(MN) = O(MD/S)` per step; the two balance when `S ∝ √D`.
pub fn suggest_minibatch_count(d: usize, proportionality: f64) -> usize {
    let raw = (proportionality * (d as f64).sqrt()).round();
    (raw.max(1.0) as usize).min(d.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn dvec(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn centered_quadratic_minimum() {
        let p = QuadraticEnsemble::from_parts(
            vec![DMatrix::identity(2, 2)],
            vec![dvec(&[0.0, 0.0])],
        )
        .unwrap();
        let e = p.eval(0, &dvec(&[0.0, 0.0])).unwrap();
        assert_eq!(e.value, 0.0);
        assert_eq!(e.gradient, dvec(&[0.0, 0.0]));
    }

    #[test]
    fn shifted_quadratic_gradient() {
        let p = QuadraticEnsemble::from_parts(
            vec![DMatrix::identity(2, 2)],
            vec![dvec(&[1.0, 0.0])],
        )
        .unwrap();
        let e = p.eval(0, &dvec(&[0.0, 0.0])).unwrap();
        assert_relative_eq!(e.value, 0.5, max_relative = 1e-15);
        assert_relative_eq!(e.gradient[0], -1.0, max_relative = 1e-15);
        assert_eq!(e.gradient[1], 0.0);
    }

    #[test]
    fn full_objective_of_symmetric_pair() {
        let p = QuadraticEnsemble::from_parts(
            vec![DMatrix::identity(1, 1), DMatrix::identity(1, 1)],
            vec![dvec(&[1.0]), dvec(&[-1.0])],
        )
        .unwrap();
        let at0 = p.full_objective(&dvec(&[0.0])).unwrap();
        assert_relative_eq!(at0.value, 1.0, max_relative = 1e-15);
        assert_eq!(at0.gradient[0], 0.0);
        let at2 = p.full_objective(&dvec(&[2.0])).unwrap();
        assert_relative_eq!(at2.value, 5.0, max_relative = 1e-15);
        assert_relative_eq!(at2.gradient[0], 4.0, max_relative = 1e-15);
        // The symmetric pair has its minimum at 0 with value 1.
        let (x_star, f_star) = p.analytic_optimum().unwrap();
        assert!(x_star[0].abs() < 1e-12);
        assert_relative_eq!(f_star, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn single_quadratic_optimum_is_center() {
        let p = QuadraticEnsemble::from_parts(
            vec![DMatrix::identity(2, 2)],
            vec![dvec(&[3.0, 4.0])],
        )
        .unwrap();
        let (x_star, f_star) = p.analytic_optimum().unwrap();
        assert_relative_eq!(x_star[0], 3.0, max_relative = 1e-12);
        assert_relative_eq!(x_star[1], 4.0, max_relative = 1e-12);
        assert!(f_star.abs() < 1e-12);
    }

    #[test]
    fn full_objective_is_sum_of_subfunctions() {
        let p = make_quadratic_ensemble(11, 6, 10, 50.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = standard_normal_vector(&mut rng, 6);
        let full = p.full_objective(&x).unwrap();
        let mut value = 0.0;
        let mut gradient = DVector::zeros(6);
        for i in 0..10 {
            let e = p.eval(i, &x).unwrap();
            value += e.value;
            gradient += e.gradient;
        }
        // Same accumulation order, so the sums agree bit for bit.
        assert_eq!(full.value, value);
        assert_eq!(full.gradient, gradient);
    }

    #[test]
    fn ensemble_optimum_solves_normal_equations() {
        let p = make_quadratic_ensemble(7, 20, 10, 100.0).unwrap();
        let (x_star, _) = p.analytic_optimum().unwrap();
        // Independent check: assemble the normal equations densely and solve.
        let mut total = DMatrix::zeros(20, 20);
        let mut rhs = DVector::zeros(20);
        for (a, c) in p.matrices().iter().zip(p.centers()) {
            total += a;
            rhs += a * c;
        }
        let direct = total.clone().lu().solve(&rhs).unwrap();
        assert!((x_star - &direct).norm() <= 1e-10 * direct.norm().max(1.0));
        // And the full gradient vanishes there.
        let g = p.full_objective(x_star).unwrap().gradient;
        assert!(g.norm() <= 1e-8);
    }

    #[test]
    fn ensemble_spectrum_spans_condition_range() {
        let p = make_quadratic_ensemble(3, 8, 2, 100.0).unwrap();
        for a in p.matrices() {
            let eig = a.clone().symmetric_eigen().eigenvalues;
            let lo = eig.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_relative_eq!(lo, 1.0, max_relative = 1e-8);
            assert_relative_eq!(hi, 100.0, max_relative = 1e-8);
        }
    }

    #[test]
    fn identical_seeds_reproduce_identical_problems() {
        let a = make_quadratic_ensemble(42, 5, 3, 10.0).unwrap();
        let b = make_quadratic_ensemble(42, 5, 3, 10.0).unwrap();
        for (ma, mb) in a.matrices().iter().zip(b.matrices()) {
            assert_eq!(ma, mb);
        }
        let la = make_logistic_regression(42, 50, 4, 5, 1e-2).unwrap();
        let lb = make_logistic_regression(42, 50, 4, 5, 1e-2).unwrap();
        assert_eq!(la.dataset().features, lb.dataset().features);
        assert_eq!(la.dataset().labels, lb.dataset().labels);
    }

    #[test]
    fn eval_input_validation() {
        let p = make_quadratic_ensemble(1, 3, 2, 10.0).unwrap();
        assert!(matches!(
            p.eval(2, &dvec(&[0.0, 0.0, 0.0])),
            Err(ProblemError::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            p.eval(0, &dvec(&[0.0, 0.0])),
            Err(ProblemError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            p.eval(0, &dvec(&[f64::NAN, 0.0, 0.0])),
            Err(ProblemError::NonFiniteInput)
        ));
    }

    #[test]
    fn logistic_value_at_zero_is_ln2() {
        let p = make_logistic_regression(3, 60, 5, 6, 1e-2).unwrap();
        let x = DVector::zeros(5);
        for i in 0..6 {
            let e = p.eval(i, &x).unwrap();
            assert_relative_eq!(e.value, std::f64::consts::LN_2, max_relative = 1e-14);
        }
    }

    #[test]
    fn logistic_three_sample_minibatch_matches_finite_differences() {
        // One 3-sample minibatch: mean log-loss at x = 0 is ln 2, and the
        // analytic gradient agrees with central differences.
        let p = make_logistic_regression(5, 3, 4, 1, 0.0).unwrap();
        let x = DVector::zeros(4);
        let e = p.eval(0, &x).unwrap();
        assert_relative_eq!(e.value, std::f64::consts::LN_2, max_relative = 1e-14);
        let err = check_gradient(&p, 0, &x, 1e-6).unwrap();
        assert!(err <= 1e-5, "gradient error {err}");
    }

    #[test]
    fn logistic_curvature_at_least_penalty() {
        // Along any direction the secant slope change is at least the
        // penalty curvature 2·l2/N, since the log-loss term is convex.
        let l2 = 0.5;
        let p = make_logistic_regression(9, 40, 6, 4, l2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let x = standard_normal_vector(&mut rng, 6);
            let v = standard_normal_vector(&mut rng, 6);
            let t = 1e-3;
            let g1 = p.eval(0, &x).unwrap().gradient;
            let g2 = p.eval(0, &(&x + &v * t)).unwrap().gradient;
            let curvature = (g2 - g1).dot(&v) / t;
            let floor = 2.0 * l2 / 4.0 * v.dot(&v);
            assert!(curvature >= floor - 1e-6 * floor);
        }
    }

    #[test]
    fn logistic_requires_enough_samples() {
        assert!(matches!(
            make_logistic_regression(0, 3, 2, 5, 0.1),
            Err(ProblemError::InvalidConfig(_))
        ));
    }

    #[test]
    fn minibatch_sizes_differ_by_at_most_one() {
        let p = make_logistic_regression(2, 103, 3, 10, 0.0).unwrap();
        let sizes: Vec<usize> = (0..10).map(|i| p.dataset().batch_indices(i).len()).collect();
        let lo = *sizes.iter().min().unwrap();
        let hi = *sizes.iter().max().unwrap();
        assert!(hi - lo <= 1);
        assert_eq!(sizes.iter().sum::<usize>(), 103);
    }

    #[test]
    fn gradient_check_on_builtin_problems() {
        let quad = make_quadratic_ensemble(13, 7, 4, 30.0).unwrap();
        let logi = make_logistic_regression(13, 80, 7, 8, 1e-2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for trial in 0..100 {
            let xq = standard_normal_vector(&mut rng, 7);
            let iq = trial % 4;
            assert!(check_gradient(&quad, iq, &xq, 1e-6).unwrap() <= 1e-5);
            let xl = standard_normal_vector(&mut rng, 7);
            let il = trial % 8;
            assert!(check_gradient(&logi, il, &xl, 1e-6).unwrap() <= 1e-5);
        }
    }

    #[test]
    fn gradient_check_is_tight_for_quadratics() {
        let p = make_quadratic_ensemble(21, 5, 3, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = standard_normal_vector(&mut rng, 5);
        assert!(check_gradient(&p, 0, &x, 1e-6).unwrap() <= 1e-7);
    }

    #[test]
    fn gradient_check_detects_corruption() {
        // Wrap a quadratic and corrupt one gradient coordinate by +0.1.
        struct Corrupted(QuadraticEnsemble);
        impl Objective for Corrupted {
            fn dimension(&self) -> usize {
                self.0.dimension()
            }
            fn subfunction_count(&self) -> usize {
                self.0.subfunction_count()
            }
            fn eval(&self, i: usize, x: &DVector<f64>) -> Result<Evaluation, ProblemError> {
                let mut e = self.0.eval(i, x)?;
                e.gradient[0] += 0.1;
                Ok(e)
            }
        }
        let p = Corrupted(make_quadratic_ensemble(4, 4, 2, 5.0).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = standard_normal_vector(&mut rng, 4);
        assert!(check_gradient(&p, 0, &x, 1e-6).unwrap() >= 1e-2);
    }

    #[test]
    fn minibatch_count_suggestions() {
        assert_eq!(suggest_minibatch_count(10_000, 1.0), 100);
        assert_eq!(suggest_minibatch_count(4, 1.0), 2);
        assert_eq!(suggest_minibatch_count(50, 10.0), 50);
        assert_eq!(suggest_minibatch_count(1, 0.0), 1);
    }

    #[test]
    fn derived_optimum_has_tiny_gradient() {
        let mut p = make_logistic_regression(3, 300, 20, 6, 1e-2).unwrap();
        p.derive_optimum(1e-10, 200_000).unwrap();
        let (x_star, f_star) = p.analytic_optimum().unwrap();
        let full = p.full_objective(&x_star.clone()).unwrap();
        assert!(full.gradient.norm() <= 1e-10);
        assert_relative_eq!(full.value, f_star, max_relative = 1e-12);
    }

    #[test]
    fn cheap_quadratic_matches_finite_differences() {
        let p = CheapQuadratic::new(6, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = standard_normal_vector(&mut rng, 6);
        assert!(check_gradient(&p, 3, &x, 1e-6).unwrap() <= 1e-7);
    }
}
