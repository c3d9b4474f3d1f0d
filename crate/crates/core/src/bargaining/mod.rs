//! Task gradients as a bargaining game.
//!
//! At a non-stationary point the asymmetric bargaining solution over the unit
//! ball of update directions is `Δθ = Gα`, where the positive weights `α`
//! solve `GᵀGα = p/α` (element-wise reciprocal). At that fixed point every
//! task utility `g_iᵀΔθ` equals `p_i/α_i` and `‖Δθ‖² = Σ p_i = 1`.

mod solver;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

pub use solver::{solve_alpha, solve_alpha_raw, solve_nash_mtl};

/// Gram eigenvalues below this are reported as near-singular.
pub const NEAR_SINGULAR_EIGENVALUE: f64 = 1e-10;

/// The K task gradients stacked as the columns of a d×K matrix, with the
/// K×K Gram matrix cached.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGradientSet {
    gradients: DMatrix<f64>,
    gram: DMatrix<f64>,
    min_eigenvalue: f64,
}

impl TaskGradientSet {
    /// Builds the set from K gradient vectors of common length d.
    pub fn new(gradients: &[Vec<f64>]) -> Result<Self> {
        if gradients.is_empty() {
            return Err(Error::Empty("task gradient list"));
        }
        let d = gradients[0].len();
        if d == 0 {
            return Err(Error::Empty("task gradient vector"));
        }
        for (i, g) in gradients.iter().enumerate() {
            if g.len() != d {
                return Err(Error::DimensionMismatch(format!(
                    "gradient {i} has length {}, expected {d}",
                    g.len()
                )));
            }
        }
        let k = gradients.len();
        let matrix = DMatrix::from_fn(d, k, |r, c| gradients[c][r]);
        Self::from_matrix(matrix)
    }

    /// Builds the set from a d×K matrix whose columns are the gradients.
    pub fn from_matrix(gradients: DMatrix<f64>) -> Result<Self> {
        if gradients.ncols() == 0 {
            return Err(Error::Empty("task gradient list"));
        }
        if gradients.nrows() == 0 {
            return Err(Error::Empty("task gradient vector"));
        }
        if !gradients.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("task gradients"));
        }
        let mut gram = gradients.tr_mul(&gradients);
        // enforce exact symmetry
        let k = gram.nrows();
        for i in 0..k {
            for j in (i + 1)..k {
                let v = 0.5 * (gram[(i, j)] + gram[(j, i)]);
                gram[(i, j)] = v;
                gram[(j, i)] = v;
            }
        }
        if !gram.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("gram matrix"));
        }
        let (min_eigenvalue, _) = linalg::symmetric_eigen_range(&gram);
        Ok(Self {
            gradients,
            gram,
            min_eigenvalue,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.gradients.ncols()
    }

    pub fn dim(&self) -> usize {
        self.gradients.nrows()
    }

    /// The d×K matrix `G`.
    pub fn gradients(&self) -> &DMatrix<f64> {
        &self.gradients
    }

    /// The cached `GᵀG`.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn gradient(&self, task: usize) -> DVector<f64> {
        self.gradients.column(task).into_owned()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eigenvalue
    }

    /// Flags (without rejecting) a Gram matrix whose smallest eigenvalue is
    /// below [`NEAR_SINGULAR_EIGENVALUE`].
    pub fn is_near_singular(&self) -> bool {
        self.min_eigenvalue < NEAR_SINGULAR_EIGENVALUE
    }

    /// True when every gradient is exactly zero.
    pub fn is_all_zero(&self) -> bool {
        self.gram.iter().all(|&x| x == 0.0)
    }

    /// `Gᵀv`, the vector of directional derivatives `g_iᵀv`.
    pub fn project(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "vector of length {} against gradients of length {}",
                v.len(),
                self.dim()
            )));
        }
        Ok(self.gradients.tr_mul(v))
    }
}

/// Builds a [`TaskGradientSet`] from K gradient vectors.
pub fn build_gradient_set(gradients: &[Vec<f64>]) -> Result<TaskGradientSet> {
    TaskGradientSet::new(gradients)
}

/// A strictly positive point of the probability simplex, carried together
/// with unconstrained logits `z` such that `p = softmax(z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceVector {
    probs: DVector<f64>,
    logits: DVector<f64>,
}

impl PreferenceVector {
    /// Accepts strictly positive probabilities summing to one (within 1e-9);
    /// the stored copy is renormalised exactly.
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("preference vector"));
        }
        if let Some((i, &p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !(p.is_finite() && **p > 0.0))
        {
            return Err(Error::InvalidPreference(format!(
                "entry {i} is {p}, expected a finite positive value"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidPreference(format!(
                "entries sum to {total}, expected 1"
            )));
        }
        let logits: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        Self::from_logits(&logits)
    }

    /// `p = softmax(z)`.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::Empty("preference logits"));
        }
        if !logits.iter().all(|z| z.is_finite()) {
            return Err(Error::NonFinite("preference logits"));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let probs = DVector::from_iterator(exps.len(), exps.iter().map(|e| e / total));
        if probs.iter().any(|&p| p <= 0.0) {
            return Err(Error::InvalidPreference(
                "logit spread underflows a probability to zero".into(),
            ));
        }
        Ok(Self {
            probs,
            logits: DVector::from_column_slice(logits),
        })
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Empty("preference vector"));
        }
        Self::from_logits(&vec![0.0; k])
    }

    pub fn probs(&self) -> &DVector<f64> {
        &self.probs
    }

    pub fn logits(&self) -> &DVector<f64> {
        &self.logits
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Chains a gradient with respect to `p` through the softmax Jacobian
    /// `diag(p) − ppᵀ`. The result always sums to zero.
    pub fn chain_to_logits(&self, grad_p: &DVector<f64>) -> DVector<f64> {
        let mean = self.probs.dot(grad_p);
        self.probs.component_mul(&grad_p.map(|g| g - mean))
    }
}

/// Tuning of the concave-convex fixed-point solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_ccp_iters: usize,
    /// Bound on the constraint log-residuals `φ_i` at which each convex
    /// subproblem is considered solved.
    pub inner_tolerance: f64,
    /// Bound on `‖GᵀGα − p/α‖∞` for declaring convergence.
    pub fixed_point_tolerance: f64,
    /// Ridge added to the Gram diagonal when its smallest eigenvalue falls
    /// below this value.
    pub gram_regularization: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_ccp_iters: 20,
            inner_tolerance: 1e-8,
            fixed_point_tolerance: 1e-6,
            gram_regularization: 1e-10,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_ccp_iters == 0 {
            return Err(Error::InvalidConfig("max_ccp_iters must be >= 1".into()));
        }
        for (name, v) in [
            ("inner_tolerance", self.inner_tolerance),
            ("fixed_point_tolerance", self.fixed_point_tolerance),
            ("gram_regularization", self.gram_regularization),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Solution of the bargaining fixed point.
#[derive(Debug, Clone, PartialEq)]
pub struct BargainingWeights {
    pub alpha: DVector<f64>,
    /// `‖(GᵀG + εI)α − p/α‖∞` for the matrix actually solved.
    pub residual_inf: f64,
    pub iterations_used: usize,
    pub converged: bool,
    /// Ridge `ε` added to the Gram diagonal, zero when none was needed.
    pub regularization: f64,
}

impl BargainingWeights {
    pub fn is_regularized(&self) -> bool {
        self.regularization > 0.0
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }
}

/// The update direction `Δθ = Gα`. Refuses non-converged weights.
pub fn update_direction(
    grads: &TaskGradientSet,
    weights: &BargainingWeights,
) -> Result<DVector<f64>> {
    if !weights.converged {
        return Err(Error::NotConverged {
            residual: weights.residual_inf,
        });
    }
    update_direction_unchecked(grads, weights)
}

/// `Δθ = Gα` without the convergence check.
pub fn update_direction_unchecked(
    grads: &TaskGradientSet,
    weights: &BargainingWeights,
) -> Result<DVector<f64>> {
    if weights.len() != grads.num_tasks() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} tasks",
            weights.len(),
            grads.num_tasks()
        )));
    }
    Ok(grads.gradients() * &weights.alpha)
}

/// `‖GᵀGα − p/α‖∞` for strictly positive `α`.
pub fn fixed_point_residual(
    grads: &TaskGradientSet,
    prefs: &PreferenceVector,
    alpha: &DVector<f64>,
) -> Result<f64> {
    let k = grads.num_tasks();
    if prefs.len() != k || alpha.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "{k} tasks, {} preferences, {} weights",
            prefs.len(),
            alpha.len()
        )));
    }
    if let Some((index, &value)) = alpha
        .iter()
        .enumerate()
        .find(|(_, a)| a.is_nan() || **a <= 0.0)
    {
        return Err(Error::NonPositiveWeight { index, value });
    }
    Ok(solver::residual_inf(grads.gram(), prefs.probs(), alpha))
}
