//! Finite-difference validation battery for gradients, Hessian-vector
//! products, the bargaining Jacobian and the end-to-end hypergradient.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bargaining::{
    solve_alpha, solve_alpha_raw, PreferenceVector, SolverConfig, TaskGradientSet,
};
use crate::diffmodels::{
    finite_difference_hvp, make_illustrative, make_quadratic, make_toy_mlp, random_quadratic_spec,
    task_gradients, Batch, QuadraticSuiteSpec, TaskSuite,
};
use crate::error::Result;
use crate::hypergrad::{dalpha_dp, hypergradient, IhvpConfig, IhvpMode};

const GRADIENT_TOLERANCE: f64 = 1e-5;
const HVP_TOLERANCE: f64 = 1e-6;
const SYMMETRY_TOLERANCE: f64 = 1e-8;
const JACOBIAN_TOLERANCE: f64 = 1e-4;
const HYPERGRADIENT_TOLERANCE: f64 = 1e-2;
const RANDOM_POINTS: usize = 10;
const LOSS_STEP: f64 = 1e-6;
const PREFERENCE_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub test: String,
    /// Norm of the analytic quantity at the worst point.
    pub analytic: f64,
    /// Norm of the numeric quantity at the worst point.
    pub numeric: f64,
    pub rel_err: f64,
    pub pass: bool,
}

/// Tracks the worst relative error over several comparisons.
struct Worst {
    test: &'static str,
    tolerance: f64,
    analytic: f64,
    numeric: f64,
    rel_err: f64,
}

impl Worst {
    fn new(test: &'static str, tolerance: f64) -> Self {
        Self {
            test,
            tolerance,
            analytic: 0.0,
            numeric: 0.0,
            rel_err: 0.0,
        }
    }

    fn compare(&mut self, analytic: &[f64], numeric: &[f64]) {
        let a = DVector::from_column_slice(analytic);
        let n = DVector::from_column_slice(numeric);
        let scale = a.norm().max(n.norm()).max(1e-12);
        let rel = (&a - &n).norm() / scale;
        if rel >= self.rel_err || rel.is_nan() {
            self.rel_err = rel;
            self.analytic = a.norm();
            self.numeric = n.norm();
        }
    }

    fn finish(self) -> GradCheckEntry {
        GradCheckEntry {
            test: self.test.to_string(),
            analytic: self.analytic,
            numeric: self.numeric,
            rel_err: self.rel_err,
            pass: self.rel_err <= self.tolerance,
        }
    }
}

fn gaussian(dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

fn central_gradient<S: TaskSuite + ?Sized>(
    suite: &S,
    task: usize,
    theta: &DVector<f64>,
) -> Result<DVector<f64>> {
    let mut probe = theta.clone();
    let mut out = DVector::zeros(theta.len());
    for j in 0..theta.len() {
        let orig = probe[j];
        probe[j] = orig + LOSS_STEP;
        let up = suite.loss(task, &probe, &Batch::Full)?;
        probe[j] = orig - LOSS_STEP;
        let down = suite.loss(task, &probe, &Batch::Full)?;
        probe[j] = orig;
        out[j] = (up - down) / (2.0 * LOSS_STEP);
    }
    Ok(out)
}

fn gradient_entry<S: TaskSuite + ?Sized>(
    test: &'static str,
    suite: &S,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckEntry> {
    let mut worst = Worst::new(test, GRADIENT_TOLERANCE);
    for _ in 0..RANDOM_POINTS {
        let theta = gaussian(suite.param_dim(), 1.0, rng);
        for task in 0..suite.num_tasks() {
            let analytic = suite.grad(task, &theta, &Batch::Full)?;
            let numeric = central_gradient(suite, task, &theta)?;
            worst.compare(analytic.as_slice(), numeric.as_slice());
        }
    }
    Ok(worst.finish())
}

fn positive_weights(k: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    gaussian(k, 1.0, rng).map(|z| 0.5 + z.abs())
}

/// Tight solver settings so that central differences through the solver are
/// dominated by truncation rather than solver error.
pub fn tight_solver() -> SolverConfig {
    SolverConfig {
        max_ccp_iters: 100,
        inner_tolerance: 1e-13,
        fixed_point_tolerance: 1e-12,
        ..SolverConfig::default()
    }
}

/// Analytic `∂α/∂p` and its central-difference estimate through
/// [`solve_alpha_raw`], perturbing one preference at a time off the simplex.
pub fn alpha_jacobian_pair(
    grads: &TaskGradientSet,
    prefs: &PreferenceVector,
    cfg: &SolverConfig,
    step: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let weights = solve_alpha(grads, prefs, cfg)?;
    let analytic = dalpha_dp(grads, prefs, &weights)?.matrix;
    let k = prefs.len();
    let mut numeric = DMatrix::zeros(k, k);
    for j in 0..k {
        let mut up = prefs.probs().clone();
        let mut down = prefs.probs().clone();
        up[j] += step;
        down[j] -= step;
        let a_up = solve_alpha_raw(grads, &up, cfg)?.alpha;
        let a_down = solve_alpha_raw(grads, &down, cfg)?.alpha;
        numeric.set_column(j, &((a_up - a_down) / (2.0 * step)));
    }
    Ok((analytic, numeric))
}

/// Bilevel problem on a quadratic suite: `α(p)` solves the bargaining game
/// for the gradients at `theta0`, `θ*(p)` minimises `Σ α_i(p) ℓ_i` exactly,
/// and `L_V(θ) = ½‖θ − val_center‖²`. Returns the analytic hypergradient
/// with exact inverse-Hessian products and central differences of
/// `L_V(θ*(p))` in each `p_j`.
pub fn bilevel_hypergradient_pair(
    spec: QuadraticSuiteSpec,
    theta0: &DVector<f64>,
    prefs: &PreferenceVector,
    val_center: &DVector<f64>,
    cfg: &SolverConfig,
    step: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let suite = make_quadratic(spec)?;
    let grads = task_gradients(&suite, theta0, &Batch::Full)?;
    let val_loss = |p: &DVector<f64>| -> Result<f64> {
        let alpha = solve_alpha_raw(&grads, p, cfg)?.alpha;
        let theta = suite.scalarized_minimizer(&alpha)?;
        Ok(0.5 * (theta - val_center).norm_squared())
    };
    let weights = solve_alpha(&grads, prefs, cfg)?;
    let theta_star = suite.scalarized_minimizer(&weights.alpha)?;
    let ihvp = IhvpConfig {
        mode: IhvpMode::ExactSolve,
        ..IhvpConfig::default()
    };
    let analytic = hypergradient(
        &suite,
        &theta_star,
        &Batch::Full,
        &grads,
        prefs,
        &weights,
        &(&theta_star - val_center),
        &ihvp,
    )?
    .grad_p;
    let k = prefs.len();
    let mut numeric = DVector::zeros(k);
    for j in 0..k {
        let mut up = prefs.probs().clone();
        let mut down = prefs.probs().clone();
        up[j] += step;
        down[j] -= step;
        numeric[j] = (val_loss(&up)? - val_loss(&down)?) / (2.0 * step);
    }
    Ok((analytic, numeric))
}

/// Runs the full battery. Every random draw derives from `seed`.
pub fn run_grad_check(seed: u64) -> Result<Vec<GradCheckEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let quadratic = make_quadratic(random_quadratic_spec(3, 6, (0.5, 4.0), seed))?;
    let (illustrative, _, _) = make_illustrative(200, seed)?;
    let mlp = make_toy_mlp(6, 3, seed)?;

    let mut entries = vec![
        gradient_entry("quadratic_gradient", &quadratic, &mut rng)?,
        gradient_entry("illustrative_gradient", &illustrative, &mut rng)?,
        gradient_entry("mlp_gradient", &mlp, &mut rng)?,
    ];

    let mut hvp = Worst::new("quadratic_hvp", HVP_TOLERANCE);
    for _ in 0..RANDOM_POINTS {
        let alpha = positive_weights(3, &mut rng);
        let theta = gaussian(6, 1.0, &mut rng);
        let v = gaussian(6, 1.0, &mut rng);
        let exact = quadratic.hvp(&alpha, &theta, &v, &Batch::Full)?;
        let fd = finite_difference_hvp(&quadratic, &alpha, &theta, &v, &Batch::Full)?;
        hvp.compare(exact.as_slice(), fd.as_slice());
    }
    entries.push(hvp.finish());

    let mut symmetry = Worst::new("mlp_hvp_symmetry", SYMMETRY_TOLERANCE);
    for _ in 0..RANDOM_POINTS {
        let d = mlp.param_dim();
        let alpha = positive_weights(3, &mut rng);
        let theta = mlp.init_params(rng.random_range(0..u64::MAX));
        let (u, v) = (gaussian(d, 1.0, &mut rng), gaussian(d, 1.0, &mut rng));
        let uhv = u.dot(&mlp.hvp(&alpha, &theta, &v, &Batch::Full)?);
        let vhu = v.dot(&mlp.hvp(&alpha, &theta, &u, &Batch::Full)?);
        symmetry.compare(&[uhv], &[vhu]);
    }
    entries.push(symmetry.finish());

    let cfg = tight_solver();
    let mut jacobian = Worst::new("alpha_jacobian", JACOBIAN_TOLERANCE);
    for _ in 0..RANDOM_POINTS {
        let k = 3;
        let grads = TaskGradientSet::from_matrix(DMatrix::from_fn(5, k, |_, _| {
            StandardNormal.sample(&mut rng)
        }))?;
        let w = positive_weights(k, &mut rng);
        let prefs = PreferenceVector::from_probs((&w / w.sum()).as_slice())?;
        let (analytic, numeric) = alpha_jacobian_pair(&grads, &prefs, &cfg, PREFERENCE_STEP)?;
        jacobian.compare(analytic.as_slice(), numeric.as_slice());
    }
    entries.push(jacobian.finish());

    let mut end_to_end = Worst::new("hypergradient_end_to_end", HYPERGRADIENT_TOLERANCE);
    for i in 0..3 {
        let spec = random_quadratic_spec(2, 4, (0.5, 3.0), seed.wrapping_add(i));
        let theta0 = gaussian(4, 2.0, &mut rng);
        let val_center = gaussian(4, 1.0, &mut rng);
        let prefs = PreferenceVector::from_probs(&[0.35, 0.65])?;
        let (analytic, numeric) =
            bilevel_hypergradient_pair(spec, &theta0, &prefs, &val_center, &cfg, PREFERENCE_STEP)?;
        end_to_end.compare(analytic.as_slice(), numeric.as_slice());
    }
    entries.push(end_to_end.finish());
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn battery_passes() {
        let entries = run_grad_check(0).unwrap();
        assert_eq!(entries.len(), 7);
        for e in &entries {
            assert!(e.pass, "{e:?}");
        }
    }

    #[test]
    fn worst_tracks_largest_error() {
        let mut w = Worst::new("t", 0.1);
        w.compare(&[1.0], &[1.0]);
        w.compare(&[1.0], &[2.0]);
        w.compare(&[1.0], &[1.01]);
        let e = w.finish();
        assert_eq!(e.rel_err, 0.5);
        assert_eq!(e.numeric, 2.0);
        assert!(!e.pass);
    }
}
