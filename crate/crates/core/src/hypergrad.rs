//! Gradient of a validation loss with respect to the preference vector.
//!
//! With `L_T(θ, α) = Σ α_i ℓ_i(θ)` and `α = α(p)` the bargaining fixed point,
//! the implicit function theorem gives
//!
//! ```text
//! ∂L_V/∂p = −∇L_V(θ)ᵀ H⁻¹ G · [GᵀG + Λ₀]⁻¹ Λ₁,   H = Σ α_i ∇²ℓ_i(θ)
//! ```
//!
//! where `Λ₀ = diag(p/α²)` and `Λ₁ = diag(1/α)`. The inverse-Hessian-vector
//! product is approximated with a truncated Neumann series.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bargaining::{BargainingWeights, PreferenceVector, TaskGradientSet};
use crate::diffmodels::{Batch, TaskSuite};
use crate::error::{Error, Result};
use crate::linalg;

/// Largest dimension for which `exact_solve` materialises the Hessian.
pub const EXACT_SOLVE_MAX_DIM: usize = 512;
/// Power iterations used to estimate `‖H‖` for the default Neumann scale.
pub const POWER_ITERATIONS: usize = 10;
const SCALE_SAFETY: f64 = 0.9;
const SCALE_CLAMP: (f64, f64) = (1e-6, 1.0);
/// Growth of a Neumann term over the right-hand side treated as divergence.
const DIVERGENCE_GROWTH: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IhvpMode {
    #[default]
    Neumann,
    ExactSolve,
    /// Treats the Hessian as the identity.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IhvpConfig {
    pub neumann_steps: usize,
    /// Fixed series scale `η`; `None` estimates `0.9/‖H‖` by power iteration.
    pub neumann_scale: Option<f64>,
    pub mode: IhvpMode,
}

impl Default for IhvpConfig {
    fn default() -> Self {
        Self {
            neumann_steps: 3,
            neumann_scale: None,
            mode: IhvpMode::Neumann,
        }
    }
}

impl IhvpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.neumann_steps == 0 {
            return Err(Error::InvalidConfig("neumann_steps must be >= 1".into()));
        }
        if let Some(eta) = self.neumann_scale {
            if !(eta.is_finite() && eta > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "neumann_scale must be > 0, got {eta}"
                )));
            }
        }
        Ok(())
    }
}

/// An approximate `H⁻¹ rhs` with bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct IhvpSolution {
    pub value: DVector<f64>,
    pub oracle_calls: usize,
    /// Neumann scale used, `None` outside Neumann mode.
    pub scale: Option<f64>,
}

/// Approximates `H⁻¹ rhs` given the product `v ↦ Hv`.
///
/// Neumann mode returns `η Σ_{j<J} (I − ηH)^j rhs` with `J = neumann_steps`
/// series terms.
pub fn ihvp<F>(mut hvp: F, rhs: &DVector<f64>, cfg: &IhvpConfig) -> Result<IhvpSolution>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    cfg.validate()?;
    if !rhs.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("inverse-Hessian right-hand side"));
    }
    let d = rhs.len();
    let mut calls = 0usize;
    let mut apply = |v: &DVector<f64>| -> Result<DVector<f64>> {
        calls += 1;
        let hv = hvp(v)?;
        if hv.len() != v.len() {
            return Err(Error::DimensionMismatch(format!(
                "Hessian product has length {}, expected {}",
                hv.len(),
                v.len()
            )));
        }
        if !hv.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("Hessian-vector product"));
        }
        Ok(hv)
    };
    match cfg.mode {
        IhvpMode::Identity => Ok(IhvpSolution {
            value: rhs.clone(),
            oracle_calls: 0,
            scale: None,
        }),
        IhvpMode::ExactSolve => {
            if d > EXACT_SOLVE_MAX_DIM {
                return Err(Error::InvalidConfig(format!(
                    "exact_solve supports dimension <= {EXACT_SOLVE_MAX_DIM}, got {d}"
                )));
            }
            let mut h = DMatrix::zeros(d, d);
            for j in 0..d {
                let mut e = DVector::zeros(d);
                e[j] = 1.0;
                h.set_column(j, &apply(&e)?);
            }
            let h = (&h + h.transpose()) * 0.5;
            let value = match h.clone().cholesky() {
                Some(chol) => chol.solve(rhs),
                None => h
                    .lu()
                    .solve(rhs)
                    .ok_or_else(|| Error::Singular("Hessian in exact_solve".into()))?,
            };
            if !value.iter().all(|x| x.is_finite()) {
                return Err(Error::Singular("Hessian in exact_solve".into()));
            }
            Ok(IhvpSolution {
                value,
                oracle_calls: calls,
                scale: None,
            })
        }
        IhvpMode::Neumann => {
            let eta = match cfg.neumann_scale {
                Some(eta) => eta,
                None => {
                    let norm = linalg::power_iteration(&mut apply, d, POWER_ITERATIONS, 0)?;
                    if norm > 0.0 {
                        (SCALE_SAFETY / norm).clamp(SCALE_CLAMP.0, SCALE_CLAMP.1)
                    } else {
                        SCALE_CLAMP.1
                    }
                }
            };
            let rhs_norm = rhs.norm();
            let mut term = rhs.clone();
            let mut total = rhs.clone();
            for _ in 1..cfg.neumann_steps {
                let h_term = apply(&term)?;
                term.axpy(-eta, &h_term, 1.0);
                if term.norm() > DIVERGENCE_GROWTH * rhs_norm {
                    return Err(Error::Diverged(format!(
                        "Neumann series term grew beyond {DIVERGENCE_GROWTH:e} x the right-hand side"
                    )));
                }
                total += &term;
            }
            Ok(IhvpSolution {
                value: total * eta,
                oracle_calls: calls,
                scale: Some(eta),
            })
        }
    }
}

/// `∂α/∂p = [GᵀG + Λ₀]⁻¹ Λ₁` with its diagonal ingredients.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaJacobian {
    /// Row `i`, column `j` holds `∂α_i/∂p_j`.
    pub matrix: DMatrix<f64>,
    /// `p_i/α_i²`.
    pub lambda0: DVector<f64>,
    /// `1/α_i`.
    pub lambda1: DVector<f64>,
}

impl AlphaJacobian {
    /// Recomputes `[M + Λ₀]⁻¹Λ₁` from the stored diagonals for a given
    /// (possibly ridge-shifted) Gram matrix `M`.
    pub fn recompute(&self, gram: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let lhs = gram + DMatrix::from_diagonal(&self.lambda0);
        linalg::cholesky_solve(&lhs, &DMatrix::from_diagonal(&self.lambda1))
    }
}

/// Jacobian of the bargaining weights with respect to the preference vector,
/// treating `p` as a point of the open positive orthant.
pub fn dalpha_dp(
    grads: &TaskGradientSet,
    prefs: &PreferenceVector,
    weights: &BargainingWeights,
) -> Result<AlphaJacobian> {
    dalpha_dw(grads, prefs.probs(), weights)
}

/// As [`dalpha_dp`] for arbitrary positive bargaining powers `w`.
pub fn dalpha_dw(
    grads: &TaskGradientSet,
    w: &DVector<f64>,
    weights: &BargainingWeights,
) -> Result<AlphaJacobian> {
    let k = grads.num_tasks();
    if w.len() != k || weights.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "{k} tasks, {} preferences, {} weights",
            w.len(),
            weights.len()
        )));
    }
    if !weights.converged {
        return Err(Error::NotConverged {
            residual: weights.residual_inf,
        });
    }
    if !grads.gram().iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("Gram matrix"));
    }
    let alpha = &weights.alpha;
    if let Some((index, &value)) = alpha
        .iter()
        .enumerate()
        .find(|(_, a)| a.is_nan() || **a <= 0.0)
    {
        return Err(Error::NonPositiveWeight { index, value });
    }
    if let Some(p) = w.iter().find(|p| p.is_nan() || **p <= 0.0) {
        return Err(Error::InvalidPreference(format!(
            "preference {p} is not strictly positive"
        )));
    }
    let lambda0 = DVector::from_fn(k, |i, _| w[i] / (alpha[i] * alpha[i]));
    let lambda1 = alpha.map(|a| 1.0 / a);
    let mut gram = grads.gram().clone();
    for i in 0..k {
        gram[(i, i)] += weights.regularization;
    }
    let jac = AlphaJacobian {
        matrix: DMatrix::zeros(k, k),
        lambda0,
        lambda1,
    };
    let matrix = jac.recompute(&gram)?;
    Ok(AlphaJacobian { matrix, ..jac })
}

/// `vᵀ ∂²L_T/∂θ∂αᵀ = (g_1ᵀv, …, g_Kᵀv)` at `θ`.
pub fn mixed_partial_vjp<S: TaskSuite + ?Sized>(
    suite: &S,
    theta: &DVector<f64>,
    v: &DVector<f64>,
    batch: &Batch,
) -> Result<DVector<f64>> {
    if v.len() != suite.param_dim() || theta.len() != suite.param_dim() {
        return Err(Error::DimensionMismatch(format!(
            "parameter length {} and vector length {}, expected {}",
            theta.len(),
            v.len(),
            suite.param_dim()
        )));
    }
    let k = suite.num_tasks();
    let mut out = DVector::zeros(k);
    for i in 0..k {
        out[i] = suite.grad(i, theta, batch)?.dot(v);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypergradDiagnostics {
    pub ihvp_oracle_calls: usize,
    pub ihvp_scale: Option<f64>,
    pub val_grad_norm: f64,
    pub ihvp_norm: f64,
    pub mixed_partial_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypergradResult {
    pub grad_p: DVector<f64>,
    /// `grad_p` chained through the softmax Jacobian; sums to zero.
    pub grad_logits: DVector<f64>,
    pub diagnostics: HypergradDiagnostics,
}

/// The preference hypergradient.
///
/// `grads` is the gradient set the weights were solved from; the Hessian
/// `Σ α_i ∇²ℓ_i` and the mixed partial are evaluated at `theta` on `batch`.
/// In training both refer to the same point. Keeping them separate lets an
/// exact inner minimiser `θ*` of `L_T(·, α)` be supplied.
#[allow(clippy::too_many_arguments)]
pub fn hypergradient<S: TaskSuite + ?Sized>(
    suite: &S,
    theta: &DVector<f64>,
    batch: &Batch,
    grads: &TaskGradientSet,
    prefs: &PreferenceVector,
    weights: &BargainingWeights,
    val_grad: &DVector<f64>,
    cfg: &IhvpConfig,
) -> Result<HypergradResult> {
    if val_grad.len() != suite.param_dim() {
        return Err(Error::DimensionMismatch(format!(
            "validation gradient has length {}, expected {}",
            val_grad.len(),
            suite.param_dim()
        )));
    }
    let jac = dalpha_dp(grads, prefs, weights)?;
    let alpha = &weights.alpha;
    let solved = ihvp(|v| suite.hvp(alpha, theta, v, batch), val_grad, cfg)?;
    let mixed = mixed_partial_vjp(suite, theta, &solved.value, batch)?;
    let grad_p = -(jac.matrix.transpose() * &mixed);
    if !grad_p.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("preference hypergradient"));
    }
    let grad_logits = prefs.chain_to_logits(&grad_p);
    Ok(HypergradResult {
        grad_p,
        grad_logits,
        diagnostics: HypergradDiagnostics {
            ihvp_oracle_calls: solved.oracle_calls,
            ihvp_scale: solved.scale,
            val_grad_norm: val_grad.norm(),
            ihvp_norm: solved.value.norm(),
            mixed_partial_norm: mixed.norm(),
        },
    })
}
