//! The shared adaptive low-dimensional subspace.
//!
//! All optimizer state (positions, gradients, per-subfunction histories and
//! Hessians) lives in the coordinates of an orthonormal basis `P ∈ R^{M×K}`.
//! The basis grows by one column per observation — the component of each new
//! gradient orthogonal to the current span — and, whenever `K` exceeds
//! `K_max`, is collapsed back to the span of the most recent gradient and
//! position of every active subfunction.
//!
//! Collapse is computed entirely inside the old subspace: the retained
//! directions are found by orthogonalizing coordinate vectors, producing a
//! projection matrix `T = (P′)ᵀP` that maps old coordinates into the new
//! subspace. Vector components outside the retained span are lost by
//! construction.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Relative residual below which a vector counts as already inside the
/// subspace and expansion is skipped. Appending such near-dependent columns
/// would destroy the basis conditioning.
pub const EPS_EXPAND: f64 = 1e-8;

/// Maximum allowed `‖PᵀP − I‖_max` before the basis is re-orthonormalized.
pub const ORTHONORMALITY_TOL: f64 = 1e-10;

/// Expansions between orthonormality-drift checks.
const DRIFT_CHECK_INTERVAL: usize = 50;

/// Collapse inputs whose post-orthogonalization residual falls below this
/// fraction of the column's own norm are treated as linearly dependent and
/// dropped. The tolerance is per column rather than relative to the
/// largest input: with mixed scales (huge gradients next to unit-scale
/// positions) a global threshold would discard position components far
/// above round-off and break the guarantee that every recent observation
/// stays representable in the subspace.
pub const COLLAPSE_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum SubspaceError {
    #[error("input vector contains non-finite entries")]
    NonFiniteInput,
    #[error("vector has length {got}, expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("collapse requested at K = {k} but the cap is K_max = {k_max}")]
    CollapseNotNeeded { k: usize, k_max: usize },
    #[error("collapse inputs span nothing (all columns negligible)")]
    DegenerateCollapse,
}

/// Outcome of a basis mutation, telling state holders how to update their
/// coordinate representations.
#[derive(Debug, Clone)]
pub enum ProjectionUpdate {
    /// The vector was already inside the span; nothing changed.
    Unchanged,
    /// One column was appended; coordinate vectors gain a trailing zero.
    Appended { column: DVector<f64> },
    /// The basis was rebuilt; old coordinates map through `projection`
    /// (`T = (P′)ᵀP`, shape K′×K).
    Collapsed { projection: DMatrix<f64> },
}

/// An `M×K` column-orthonormal basis with expansion and collapse
/// bookkeeping.
#[derive(Debug, Clone)]
pub struct Subspace {
    /// Basis columns, each of length `M`. Stored as separate vectors so
    /// expansion is an O(1) append.
    columns: Vec<DVector<f64>>,
    full_dim: usize,
    k_min: usize,
    k_max: usize,
    generation: u64,
    expansions_since_check: usize,
}

impl Subspace {
    /// An empty basis over `R^full_dim` with the given size bounds.
    pub fn new(full_dim: usize, k_min: usize, k_max: usize) -> Self {
        Self {
            columns: Vec::new(),
            full_dim,
            k_min,
            k_max: k_max.max(1),
            generation: 0,
            expansions_since_check: 0,
        }
    }

    pub fn full_dim(&self) -> usize {
        self.full_dim
    }

    /// Current dimensionality `K`.
    pub fn k(&self) -> usize {
        self.columns.len()
    }

    pub fn k_min(&self) -> usize {
        self.k_min
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    /// Number of collapses performed so far.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// True when `K` has outgrown `K_max` and a collapse is due.
    pub fn needs_collapse(&self) -> bool {
        self.k() > self.k_max
    }

    /// `P·coords`: maps subspace coordinates back to the full space.
    pub fn to_full(&self, coords: &DVector<f64>) -> DVector<f64> {
        assert_eq!(coords.len(), self.k(), "coordinate length mismatch");
        let mut out = DVector::zeros(self.full_dim);
        for (c, col) in coords.iter().zip(&self.columns) {
            out.axpy(*c, col, 1.0);
        }
        out
    }

    /// `Pᵀ·full`: projects a full-space vector into subspace coordinates.
    pub fn to_coords(&self, full: &DVector<f64>) -> DVector<f64> {
        assert_eq!(full.len(), self.full_dim, "full-space length mismatch");
        DVector::from_iterator(self.k(), self.columns.iter().map(|col| col.dot(full)))
    }

    /// The basis as a dense `M×K` matrix (test and debugging aid).
    pub fn basis_matrix(&self) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(self.full_dim, self.k());
        for (j, col) in self.columns.iter().enumerate() {
            p.set_column(j, col);
        }
        p
    }

    /// `‖PᵀP − I‖_max` over all column pairs.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.columns.len() {
            for j in i..self.columns.len() {
                let d = self.columns[i].dot(&self.columns[j]);
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((d - target).abs());
            }
        }
        worst
    }

    /// Component of `v` orthogonal to the span. Projects twice: a single
    /// Gram-Schmidt pass leaves a residual proportional to the conditioning
    /// of the input, a second pass reduces it to round-off.
    fn orthogonal_residual(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut q = v.clone();
        for _ in 0..2 {
            for col in &self.columns {
                let c = col.dot(&q);
                q.axpy(-c, col, 1.0);
            }
        }
        q
    }

    /// Expands the subspace to include `v`.
    ///
    /// Appends the normalized component of `v` outside the current span,
    /// unless that component is smaller than [`EPS_EXPAND`]`·‖v‖`, in which
    /// case the basis is left unchanged. Existing coordinate vectors stay
    /// valid by appending a zero entry.
    pub fn expand(&mut self, v: &DVector<f64>) -> Result<ProjectionUpdate, SubspaceError> {
        if v.len() != self.full_dim {
            return Err(SubspaceError::DimensionMismatch {
                got: v.len(),
                expected: self.full_dim,
            });
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(SubspaceError::NonFiniteInput);
        }
        if self.k() >= self.full_dim {
            // The span is already all of R^M; nothing can lie outside it.
            return Ok(ProjectionUpdate::Unchanged);
        }
        let q = self.orthogonal_residual(v);
        let norm = q.norm();
        if norm <= EPS_EXPAND * v.norm() || norm == 0.0 {
            return Ok(ProjectionUpdate::Unchanged);
        }
        let column = q / norm;
        self.columns.push(column.clone());
        self.expansions_since_check += 1;
        if self.expansions_since_check >= DRIFT_CHECK_INTERVAL {
            self.expansions_since_check = 0;
            if self.orthonormality_error() > ORTHONORMALITY_TOL {
                self.reorthonormalize();
            }
        }
        Ok(ProjectionUpdate::Appended { column })
    }

    /// In-place modified Gram-Schmidt sweep to repair floating-point drift.
    /// Column directions are preserved up to the drift magnitude, so stored
    /// coordinates remain valid to the same order.
    fn reorthonormalize(&mut self) {
        for i in 0..self.columns.len() {
            let (done, rest) = self.columns.split_at_mut(i);
            let col = &mut rest[0];
            for _ in 0..2 {
                for prev in done.iter() {
                    let c = prev.dot(col);
                    col.axpy(-c, prev, 1.0);
                }
            }
            let norm = col.norm();
            if norm > 0.0 {
                *col /= norm;
            }
        }
    }

    /// Collapses the basis to the span of the given coordinate vectors (the
    /// most recent gradient and position of each active subfunction,
    /// gradients stacked first), returning the `K′×K` projection `T` that
    /// maps old coordinates into the new subspace.
    ///
    /// Only callable when `K > K_max`. Linearly dependent inputs are dropped
    /// by the rank-revealing tolerance, so `K′` never exceeds the number of
    /// independent inputs.
    pub fn collapse(
        &mut self,
        recent_gradients: &[DVector<f64>],
        recent_positions: &[DVector<f64>],
    ) -> Result<DMatrix<f64>, SubspaceError> {
        if !self.needs_collapse() {
            return Err(SubspaceError::CollapseNotNeeded {
                k: self.k(),
                k_max: self.k_max,
            });
        }
        let k = self.k();
        let inputs: Vec<&DVector<f64>> =
            recent_gradients.iter().chain(recent_positions).collect();
        for v in &inputs {
            if v.len() != k {
                return Err(SubspaceError::DimensionMismatch {
                    got: v.len(),
                    expected: k,
                });
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(SubspaceError::NonFiniteInput);
            }
        }
        let largest = inputs.iter().map(|v| v.norm()).fold(0.0f64, f64::max);
        if largest == 0.0 {
            return Err(SubspaceError::DegenerateCollapse);
        }

        // Orthogonalize the inputs in their given order, inside the old
        // coordinate system. Retained directions become the rows of T.
        let mut retained: Vec<DVector<f64>> = Vec::new();
        for v in &inputs {
            let input_norm = v.norm();
            if input_norm == 0.0 {
                continue;
            }
            let mut q = (*v).clone();
            for _ in 0..2 {
                for r in &retained {
                    let c = r.dot(&q);
                    q.axpy(-c, r, 1.0);
                }
            }
            let norm = q.norm();
            if norm >= COLLAPSE_RANK_TOL * input_norm {
                retained.push(q / norm);
            }
        }
        if retained.is_empty() {
            return Err(SubspaceError::DegenerateCollapse);
        }

        let k_new = retained.len();
        let mut projection = DMatrix::zeros(k_new, k);
        for (row, r) in retained.iter().enumerate() {
            for col in 0..k {
                projection[(row, col)] = r[col];
            }
        }

        // New full-space basis: P′ = P · Q where Q's columns are the
        // retained coordinate directions.
        let new_columns: Vec<DVector<f64>> = retained.iter().map(|r| self.to_full(r)).collect();
        self.columns = new_columns;
        self.generation += 1;
        self.expansions_since_check = 0;
        if self.orthonormality_error() > ORTHONORMALITY_TOL {
            self.reorthonormalize();
        }
        Ok(projection)
    }
}
