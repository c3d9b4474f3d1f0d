//! Independent oracles shared by the integration and acceptance tests.

#![allow(dead_code)]

use auxinash::bargaining::{solve_alpha_raw, SolverConfig, TaskGradientSet};
use auxinash::diffmodels::{make_quadratic, task_gradients, Batch, QuadraticSuiteSpec};
use auxinash::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z
    })
}

pub fn gaussian_vector(dim: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    gaussian_matrix(dim, 1, rng).column(0).into_owned()
}

/// A d×K gradient matrix `U diag(s) Vᵀ` with singular values in
/// `[1, √max_gram_cond]`, so the Gram condition number stays below
/// `max_gram_cond`.
pub fn conditioned_gradients(
    k: usize,
    d: usize,
    max_gram_cond: f64,
    rng: &mut ChaCha8Rng,
) -> DMatrix<f64> {
    let u = gaussian_matrix(d, k, rng).qr().q();
    let v = gaussian_matrix(k, k, rng).qr().q();
    let top = max_gram_cond.sqrt() * 0.999;
    let s = DVector::from_fn(k, |i, _| {
        if i == 0 {
            1.0
        } else if i == 1 {
            top
        } else {
            rng.random_range(1.0..top)
        }
    });
    u * DMatrix::from_diagonal(&s) * v.transpose()
}

/// A random point of the open simplex with entries bounded away from zero.
pub fn random_simplex(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|x| x / total).collect()
}

/// Damped Newton on the strictly convex `f(α) = ½αᵀMα − Σ w_i log α_i`,
/// whose unique stationary point solves `Mα = w/α`. Steps stay inside
/// `α > 0`.
pub fn newton_oracle(gram: &DMatrix<f64>, w: &DVector<f64>) -> DVector<f64> {
    let k = w.len();
    let f =
        |a: &DVector<f64>| 0.5 * a.dot(&(gram * a)) - (0..k).map(|i| w[i] * a[i].ln()).sum::<f64>();
    let mut a = DVector::from_fn(k, |i, _| (w[i] / gram[(i, i)]).sqrt());
    for _ in 0..500 {
        let grad = gram * &a - w.component_div(&a);
        if grad.amax() < 1e-14 {
            break;
        }
        let mut hess = gram.clone();
        for i in 0..k {
            hess[(i, i)] += w[i] / (a[i] * a[i]);
        }
        let step = hess
            .cholesky()
            .expect("oracle Hessian is positive definite")
            .solve(&(-&grad));
        let mut s: f64 = 1.0;
        for i in 0..k {
            if step[i] < 0.0 {
                s = s.min(-0.9 * a[i] / step[i]);
            }
        }
        let f0 = f(&a);
        let slope = grad.dot(&step);
        // near the solution f changes below rounding, so a drop in the
        // gradient norm also accepts the step
        let accept = |s: f64| {
            let trial = &a + s * &step;
            f(&trial) <= f0 + 1e-4 * s * slope
                || (gram * &trial - w.component_div(&trial)).amax() < 0.5 * grad.amax()
        };
        while s > 1e-20 && !accept(s) {
            s *= 0.5;
        }
        let next = &a + s * &step;
        if (&next - &a).amax() <= 1e-17 * a.amax() {
            break;
        }
        a = next;
    }
    a
}

pub fn residual(gram: &DMatrix<f64>, w: &DVector<f64>, alpha: &DVector<f64>) -> f64 {
    (gram * alpha - w.component_div(alpha)).amax()
}

pub fn tight_solver() -> SolverConfig {
    SolverConfig {
        max_ccp_iters: 100,
        inner_tolerance: 1e-13,
        fixed_point_tolerance: 1e-12,
        ..SolverConfig::default()
    }
}

/// Central differences of `α(w)` through the solver, one column per `w_j`.
pub fn alpha_jacobian_fd(
    grads: &TaskGradientSet,
    w: &DVector<f64>,
    cfg: &SolverConfig,
    h: f64,
) -> DMatrix<f64> {
    let k = w.len();
    let mut jac = DMatrix::zeros(k, k);
    for j in 0..k {
        let mut up = w.clone();
        let mut down = w.clone();
        up[j] += h;
        down[j] -= h;
        let a_up = solve_alpha_raw(grads, &up, cfg).unwrap().alpha;
        let a_down = solve_alpha_raw(grads, &down, cfg).unwrap().alpha;
        jac.set_column(j, &((a_up - a_down) / (2.0 * h)));
    }
    jac
}

/// `L_V(θ*(w))` for the bilevel quadratic problem: `α(w)` solves the game
/// for the gradients at `theta0`, `θ*` minimises `Σ α_i ℓ_i` in closed form
/// and `L_V(θ) = ½‖θ − target‖²`.
pub fn bilevel_value(
    spec: &QuadraticSuiteSpec,
    theta0: &DVector<f64>,
    w: &DVector<f64>,
    target: &DVector<f64>,
    cfg: &SolverConfig,
) -> f64 {
    let suite = make_quadratic(spec.clone()).unwrap();
    let grads = task_gradients(&suite, theta0, &Batch::Full).unwrap();
    let alpha = solve_alpha_raw(&grads, w, cfg).unwrap().alpha;
    let d = theta0.len();
    let mut lhs = DMatrix::zeros(d, d);
    let mut rhs = DVector::zeros(d);
    for (i, (a, c)) in spec.matrices.iter().zip(&spec.centers).enumerate() {
        lhs += a * alpha[i];
        rhs += a * c * alpha[i];
    }
    let theta = lhs.lu().solve(&rhs).unwrap();
    0.5 * (theta - target).norm_squared()
}

/// Central differences of [`bilevel_value`] in each `w_j`.
pub fn bilevel_fd(
    spec: &QuadraticSuiteSpec,
    theta0: &DVector<f64>,
    w: &DVector<f64>,
    target: &DVector<f64>,
    cfg: &SolverConfig,
    h: f64,
) -> DVector<f64> {
    DVector::from_fn(w.len(), |j, _| {
        let mut up = w.clone();
        let mut down = w.clone();
        up[j] += h;
        down[j] -= h;
        (bilevel_value(spec, theta0, &up, target, cfg)
            - bilevel_value(spec, theta0, &down, target, cfg))
            / (2.0 * h)
    })
}

/// Minimum of `‖Gw‖` over a regular simplex grid with `steps` divisions
/// per axis, for three tasks.
pub fn grid_min_norm3(gram: &DMatrix<f64>, steps: usize) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..=steps {
        for j in 0..=steps - i {
            let w = DVector::from_vec(vec![
                i as f64 / steps as f64,
                j as f64 / steps as f64,
                (steps - i - j) as f64 / steps as f64,
            ]);
            best = best.min(w.dot(&(gram * &w)).max(0.0).sqrt());
        }
    }
    best
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt())
        .max(1e-12);
    diff / scale
}
