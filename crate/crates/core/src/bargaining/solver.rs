//! Concave-convex procedure for `Mα = w/α` with `M = GᵀG` and positive
//! bargaining powers `w`.
//!
//! With `β(α) = Mα` and `φ_i(α) = log α_i + log β_i(α) − log w_i`, the fixed
//! point is the unique `α > 0` with `φ(α) = 0`. It is the minimiser of the
//! concave objective `Σ φ_i` over the convex set `{α > 0 : φ_i(α) ≥ 0}`.
//! Each CCP iteration replaces the objective by its tangent plane at the
//! current iterate, leaving a linear objective over a convex set, which is
//! solved with a log-barrier interior-point method (Newton steps with
//! backtracking). The first iteration, taken from a strictly positive
//! starting point, is the convex relaxation.

use nalgebra::{DMatrix, DVector};

use super::{BargainingWeights, PreferenceVector, SolverConfig, TaskGradientSet};
use crate::error::{Error, Result};

const INIT_CLIP: (f64, f64) = (1e-6, 1e6);
const INTERIOR_MARGIN: f64 = 1e-2;
const BARRIER_GROWTH: f64 = 10.0;
const MAX_BARRIER_STAGES: usize = 60;
const MAX_NEWTON_STEPS: usize = 60;
const MAX_PHASE1_STEPS: usize = 500;
const MAX_POLISH_STEPS: usize = 100;
/// Fraction of the previous residual a CCP iteration must beat to count as
/// progress.
const STALL_RATIO: f64 = 0.99;

/// Solves `GᵀGα = p/α` for a preference vector on the simplex.
pub fn solve_alpha(
    grads: &TaskGradientSet,
    prefs: &PreferenceVector,
    cfg: &SolverConfig,
) -> Result<BargainingWeights> {
    if prefs.len() != grads.num_tasks() {
        return Err(Error::DimensionMismatch(format!(
            "{} preferences for {} tasks",
            prefs.len(),
            grads.num_tasks()
        )));
    }
    solve_weighted(grads.gram(), prefs.probs(), cfg)
}

/// Solves `GᵀGα = w/α` for arbitrary strictly positive `w`, not necessarily
/// on the simplex.
pub fn solve_alpha_raw(
    grads: &TaskGradientSet,
    weights: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<BargainingWeights> {
    if weights.len() != grads.num_tasks() {
        return Err(Error::DimensionMismatch(format!(
            "{} bargaining powers for {} tasks",
            weights.len(),
            grads.num_tasks()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(Error::InvalidPreference(format!(
            "bargaining power {w} is not strictly positive"
        )));
    }
    solve_weighted(grads.gram(), weights, cfg)
}

/// The symmetric game `GᵀGα = 1/α`.
pub fn solve_nash_mtl(grads: &TaskGradientSet, cfg: &SolverConfig) -> Result<BargainingWeights> {
    let ones = DVector::from_element(grads.num_tasks(), 1.0);
    solve_weighted(grads.gram(), &ones, cfg)
}

pub(crate) fn residual_inf(m: &DMatrix<f64>, w: &DVector<f64>, alpha: &DVector<f64>) -> f64 {
    let beta = m * alpha;
    (0..alpha.len())
        .map(|i| (beta[i] - w[i] / alpha[i]).abs())
        .fold(0.0, f64::max)
}

fn solve_weighted(
    gram: &DMatrix<f64>,
    w: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<BargainingWeights> {
    cfg.validate()?;
    if !gram.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("gram matrix"));
    }
    if gram.iter().all(|&x| x == 0.0) {
        return Err(Error::ParetoStationary);
    }

    let k = gram.nrows();
    let mut m = gram.clone();
    let (min_eig, _) = crate::linalg::symmetric_eigen_range(&m);
    let regularization = if min_eig < cfg.gram_regularization {
        for i in 0..k {
            m[(i, i)] += cfg.gram_regularization;
        }
        cfg.gram_regularization
    } else {
        0.0
    };

    let game = Game::new(&m, w);
    let start = DVector::from_fn(k, |i, _| {
        (w[i].sqrt() / m[(i, i)].sqrt()).clamp(INIT_CLIP.0, INIT_CLIP.1)
    });
    let mut alpha = game.interior_start(start)?;

    let mut best_alpha = alpha.clone();
    let mut best_residual = f64::INFINITY;
    let mut previous: Option<f64> = None;
    let mut iterations_used = 0;
    let mut converged = false;

    for iter in 1..=cfg.max_ccp_iters {
        let beta = &m * &alpha;
        // tangent of Σφ at the current iterate: 1/α + M(1/β)
        let slope = alpha.map(|a| 1.0 / a) + &m * beta.map(|b| 1.0 / b);
        alpha = game.solve_linearized(&slope, alpha, cfg.inner_tolerance)?;
        iterations_used = iter;

        let residual = residual_inf(&m, w, &alpha);
        if !residual.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite residual at CCP iteration {iter}"
            )));
        }
        if residual < best_residual {
            best_residual = residual;
            best_alpha = alpha.clone();
        }
        if residual <= cfg.fixed_point_tolerance {
            converged = true;
            break;
        }
        if let Some(prev) = previous {
            if residual > STALL_RATIO * prev {
                log::debug!("CCP stalled at iteration {iter} with residual {residual:.3e}");
                break;
            }
        }
        previous = Some(residual);
    }

    if !converged {
        let (alpha, residual) = game.polish(best_alpha.clone(), cfg.fixed_point_tolerance)?;
        if residual < best_residual {
            best_alpha = alpha;
            best_residual = residual;
        }
        converged = best_residual <= cfg.fixed_point_tolerance;
    }

    Ok(BargainingWeights {
        alpha: best_alpha,
        residual_inf: best_residual,
        iterations_used,
        converged,
        regularization,
    })
}

struct Game<'a> {
    m: &'a DMatrix<f64>,
    w: &'a DVector<f64>,
    log_w: DVector<f64>,
}

impl<'a> Game<'a> {
    fn new(m: &'a DMatrix<f64>, w: &'a DVector<f64>) -> Self {
        Self {
            m,
            w,
            log_w: w.map(f64::ln),
        }
    }

    fn k(&self) -> usize {
        self.w.len()
    }

    /// `φ(α)` and `β(α)`, or `None` outside the domain `α > 0, β > 0`.
    fn phi(&self, alpha: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        if !alpha.iter().all(|&a| a > 0.0 && a.is_finite()) {
            return None;
        }
        let beta = self.m * alpha;
        if !beta.iter().all(|&b| b > 0.0 && b.is_finite()) {
            return None;
        }
        let phi = DVector::from_fn(self.k(), |i, _| {
            alpha[i].ln() + beta[i].ln() - self.log_w[i]
        });
        Some((phi, beta))
    }

    /// Moves a positive start to a point with `Mα > 0` by gradient descent in
    /// `log α` on `½αᵀMα − Σ w_i log α_i`, whose stationary point is the
    /// fixed point itself.
    fn interior_start(&self, start: DVector<f64>) -> Result<DVector<f64>> {
        let objective = |u: &DVector<f64>| {
            let a = u.map(f64::exp);
            0.5 * a.dot(&(self.m * &a)) - self.w.dot(u)
        };
        let mut u = start.map(f64::ln);
        for _ in 0..MAX_PHASE1_STEPS {
            let a = u.map(f64::exp);
            let beta = self.m * &a;
            if beta.iter().all(|&b| b > 0.0) {
                return Ok(a);
            }
            let grad = a.component_mul(&beta) - self.w;
            let f0 = objective(&u);
            let slope = grad.norm_squared();
            let mut step = 1.0;
            loop {
                let trial = &u - step * &grad;
                let f1 = objective(&trial);
                if f1 <= f0 - 1e-4 * step * slope {
                    u = trial;
                    break;
                }
                step *= 0.5;
                if step < 1e-30 {
                    return Err(Error::Diverged(
                        "no descent while searching for an interior start".into(),
                    ));
                }
            }
        }
        self.min_norm_start()
    }

    /// At the min-norm point `u = Gw` of the simplex hull every utility
    /// satisfies `g_iᵀu ≥ ‖u‖²`, so `Mw > 0` unless the gradients are Pareto
    /// stationary. A small uniform shift makes `w` strictly positive.
    fn min_norm_start(&self) -> Result<DVector<f64>> {
        let mn = crate::linalg::min_norm_simplex(self.m, 1e-12);
        let base = self.m * &mn.weights;
        if !base.iter().all(|&b| b > 0.0) {
            return Err(Error::ParetoStationary);
        }
        let mut shift = 1e-3;
        while shift > 1e-300 {
            let alpha = mn.weights.map(|w| w + shift);
            if (self.m * &alpha).iter().all(|&b| b > 0.0) {
                return Ok(alpha);
            }
            shift *= 0.5;
        }
        Err(Error::ParetoStationary)
    }

    /// Damped Newton on the strictly convex potential
    /// `f(α) = ½αᵀMα − Σ w_i log α_i`, whose gradient `Mα − w/α` vanishes
    /// exactly at the fixed point. Used when the CCP iterations stall on
    /// ill-conditioned Gram matrices. Returns the best iterate and its
    /// residual.
    fn polish(&self, mut alpha: DVector<f64>, tolerance: f64) -> Result<(DVector<f64>, f64)> {
        let k = self.k();
        let mut residual = residual_inf(self.m, self.w, &alpha);
        for _ in 0..MAX_POLISH_STEPS {
            if residual <= tolerance {
                break;
            }
            let grad = self.m * &alpha - self.w.component_div(&alpha);
            let mut hess = self.m.clone();
            for i in 0..k {
                hess[(i, i)] += self.w[i] / (alpha[i] * alpha[i]);
            }
            let step = newton_step(&hess, &grad, &alpha)?;
            let slope = grad.dot(&step);
            if slope.is_nan() || slope >= 0.0 {
                break;
            }
            // largest step keeping α strictly positive
            let mut s = (0..k)
                .filter(|&i| step[i] < 0.0)
                .map(|i| -0.99 * alpha[i] / step[i])
                .fold(1.0, f64::min);
            let m_alpha = self.m * &alpha;
            let m_step = self.m * &step;
            let curvature = step.dot(&m_step);
            let linear = step.dot(&m_alpha);
            let mut accepted = false;
            while s > 1e-16 {
                // f(α + s·step) − f(α), formed without cancellation
                let log_change: f64 = (0..k)
                    .map(|i| self.w[i] * (s * step[i] / alpha[i]).ln_1p())
                    .sum();
                let change = s * linear + 0.5 * s * s * curvature - log_change;
                if change <= 1e-4 * s * slope {
                    accepted = true;
                    break;
                }
                s *= 0.5;
            }
            if !accepted {
                break;
            }
            let trial = &alpha + s * &step;
            let trial_residual = residual_inf(self.m, self.w, &trial);
            if !trial_residual.is_finite() {
                break;
            }
            alpha = trial;
            residual = trial_residual;
        }
        Ok((alpha, residual))
    }

    /// Minimises `slopeᵀα` subject to `φ_i(α) ≥ 0` by the barrier method.
    fn solve_linearized(
        &self,
        slope: &DVector<f64>,
        start: DVector<f64>,
        tolerance: f64,
    ) -> Result<DVector<f64>> {
        let k = self.k();
        let (phi, _) = self
            .phi(&start)
            .ok_or_else(|| Error::Diverged("linearization point left the domain".into()))?;
        // scaling α by s shifts every φ_i by 2 log s
        let min_phi = phi.min();
        let mut alpha = if min_phi < INTERIOR_MARGIN {
            start * (0.5 * (INTERIOR_MARGIN - min_phi)).exp()
        } else {
            start
        };
        let mut t = k as f64 / slope.dot(&alpha).max(f64::MIN_POSITIVE);

        for _ in 0..MAX_BARRIER_STAGES {
            alpha = self.center(slope, t, alpha)?;
            let (phi, _) = self
                .phi(&alpha)
                .ok_or_else(|| Error::Diverged("barrier iterate left the domain".into()))?;
            if phi.max() <= tolerance || (k as f64) / t <= tolerance * slope.dot(&alpha) {
                break;
            }
            t *= BARRIER_GROWTH;
        }
        Ok(alpha)
    }

    /// Newton centering on `t·slopeᵀα − Σ log φ_i(α)`.
    fn center(
        &self,
        slope: &DVector<f64>,
        t: f64,
        mut alpha: DVector<f64>,
    ) -> Result<DVector<f64>> {
        let k = self.k();
        for _ in 0..MAX_NEWTON_STEPS {
            let (phi, beta) = self
                .phi(&alpha)
                .ok_or_else(|| Error::Diverged("centering iterate left the domain".into()))?;
            let mut grad = t * slope;
            let mut hess = DMatrix::<f64>::zeros(k, k);
            for i in 0..k {
                // ∇φ_i = e_i/α_i + M_i/β_i
                let mut dphi = self.m.row(i).transpose() / beta[i];
                dphi[i] += 1.0 / alpha[i];
                grad -= &dphi / phi[i];
                hess += (&dphi * dphi.transpose()) / (phi[i] * phi[i]);
                // −∇²φ_i = e_ie_iᵀ/α_i² + M_iM_iᵀ/β_i²
                let row = self.m.row(i).transpose();
                hess += (&row * row.transpose()) / (beta[i] * beta[i] * phi[i]);
                hess[(i, i)] += 1.0 / (alpha[i] * alpha[i] * phi[i]);
            }
            if !grad.iter().chain(hess.iter()).all(|x| x.is_finite()) {
                return Err(Error::Diverged("non-finite barrier derivatives".into()));
            }
            let step = newton_step(&hess, &grad, &alpha)?;
            let decrement = -grad.dot(&step);
            if decrement.is_nan() || decrement <= 2e-12 {
                break;
            }

            // compare barrier values by their difference to avoid cancellation
            let mut s = 1.0;
            let mut accepted = false;
            while s > 1e-16 {
                let trial = &alpha + s * &step;
                if let Some((phi_trial, _)) = self.phi(&trial) {
                    if phi_trial.iter().all(|&x| x > 0.0) {
                        let log_ratio: f64 = (0..k).map(|i| (phi_trial[i] / phi[i]).ln()).sum();
                        let change = t * slope.dot(&(s * &step)) - log_ratio;
                        if change <= 0.25 * s * grad.dot(&step) {
                            alpha = trial;
                            accepted = true;
                            break;
                        }
                    }
                }
                s *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        Ok(alpha)
    }
}

/// Solves `H s = −g` in the coordinates `α_i · y_i`, which equilibrates the
/// Hessian when the weights span many orders of magnitude.
fn newton_step(
    hess: &DMatrix<f64>,
    grad: &DVector<f64>,
    alpha: &DVector<f64>,
) -> Result<DVector<f64>> {
    let k = alpha.len();
    let scaled = DMatrix::from_fn(k, k, |i, j| alpha[i] * hess[(i, j)] * alpha[j]);
    let rhs = -grad.component_mul(alpha);
    if let Some(chol) = scaled.clone().cholesky() {
        return Ok(chol.solve(&rhs).component_mul(alpha));
    }
    let ridge = 1e-12 * scaled.trace().abs().max(f64::MIN_POSITIVE);
    let mut shifted = scaled;
    for i in 0..k {
        shifted[(i, i)] += ridge;
    }
    shifted
        .cholesky()
        .map(|chol| chol.solve(&rhs).component_mul(alpha))
        .ok_or_else(|| Error::Singular("barrier Hessian".into()))
}
