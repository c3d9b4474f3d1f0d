mod common;

use auxinash::bargaining::{solve_alpha, PreferenceVector, SolverConfig, TaskGradientSet};
use auxinash::diffmodels::{
    make_illustrative, make_quadratic, random_quadratic_spec, task_gradients, Batch,
    LinearRegressionSuite, QuadraticSuiteSpec, TaskSuite, HARMFUL_TASK, MAIN_TASK,
};
use auxinash::hypergrad::{dalpha_dp, hypergradient, ihvp, IhvpConfig, IhvpMode};
use auxinash::{DMatrix, DVector};
use common::*;
use proptest::prelude::*;
use rand::Rng;

const EXACT: IhvpConfig = IhvpConfig {
    neumann_steps: 1,
    neumann_scale: None,
    mode: IhvpMode::ExactSolve,
};

#[test]
fn jacobian_matches_finite_differences() {
    let mut rng = rng(3);
    let cfg = tight_solver();
    for _ in 0..30 {
        let k = rng.random_range(2..=5);
        let d = rng.random_range(k..=12);
        let g = conditioned_gradients(k, d, 100.0, &mut rng);
        let set = TaskGradientSet::from_matrix(g).unwrap();
        let prefs = PreferenceVector::from_probs(&random_simplex(k, &mut rng)).unwrap();
        let weights = solve_alpha(&set, &prefs, &cfg).unwrap();
        let analytic = dalpha_dp(&set, &prefs, &weights).unwrap().matrix;
        let numeric = alpha_jacobian_fd(&set, prefs.probs(), &cfg, 1e-6);
        let err = relative_error(analytic.as_slice(), numeric.as_slice());
        assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn orthonormal_jacobian_is_half_inverse_square_root() {
    let set = TaskGradientSet::from_matrix(DMatrix::identity(3, 3)).unwrap();
    let prefs = PreferenceVector::from_probs(&[0.2, 0.3, 0.5]).unwrap();
    let weights = solve_alpha(&set, &prefs, &tight_solver()).unwrap();
    let jac = dalpha_dp(&set, &prefs, &weights).unwrap().matrix;
    for i in 0..3 {
        for j in 0..3 {
            let expected = if i == j {
                1.0 / (2.0 * prefs.probs()[i].sqrt())
            } else {
                0.0
            };
            assert!((jac[(i, j)] - expected).abs() < 1e-10);
        }
    }
}

/// One-dimensional two-task bilevel problem with `ℓ_i = ½a_i(θ − c_i)²`,
/// `a = (1, 2)`, `c = (0, 1)`, `θ₀ = 2`, `p = (0.3, 0.7)` and
/// `L_V = ½(θ − ¼)²`. Both gradients at `θ₀` equal 2, so `α = p/2` and
/// `θ*(p) = 2p₂/(p₁ + 2p₂)`, giving `∂L_V/∂p = (−1365, 585)/4913`.
#[test]
fn scalar_hypergradient_matches_hand_derivation() {
    let spec = QuadraticSuiteSpec {
        matrices: vec![
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 2.0),
        ],
        centers: vec![DVector::from_element(1, 0.0), DVector::from_element(1, 1.0)],
    };
    let suite = make_quadratic(spec).unwrap();
    let theta0 = DVector::from_element(1, 2.0);
    let grads = task_gradients(&suite, &theta0, &Batch::Full).unwrap();
    let prefs = PreferenceVector::from_probs(&[0.3, 0.7]).unwrap();
    let weights = solve_alpha(&grads, &prefs, &tight_solver()).unwrap();
    assert!((weights.alpha[0] - 0.15).abs() < 1e-9);
    assert!((weights.alpha[1] - 0.35).abs() < 1e-9);
    let theta_star = suite.scalarized_minimizer(&weights.alpha).unwrap();
    assert!((theta_star[0] - 14.0 / 17.0).abs() < 1e-9);
    let val_grad = &theta_star - DVector::from_element(1, 0.25);
    let hg = hypergradient(
        &suite,
        &theta_star,
        &Batch::Full,
        &grads,
        &prefs,
        &weights,
        &val_grad,
        &EXACT,
    )
    .unwrap();
    assert!(
        (hg.grad_p[0] - (-1365.0 / 4913.0)).abs() < 1e-8,
        "{}",
        hg.grad_p
    );
    assert!(
        (hg.grad_p[1] - 585.0 / 4913.0).abs() < 1e-8,
        "{}",
        hg.grad_p
    );
}

#[test]
fn end_to_end_hypergradient_matches_finite_differences() {
    let mut rng = rng(5);
    let cfg = tight_solver();
    for seed in 0..5 {
        let spec = random_quadratic_spec(2, 4, (0.5, 3.0), seed);
        let suite = make_quadratic(spec.clone()).unwrap();
        let theta0 = 2.0 * gaussian_vector(4, &mut rng);
        let target = gaussian_vector(4, &mut rng);
        let p = random_simplex(2, &mut rng);
        let prefs = PreferenceVector::from_probs(&p).unwrap();
        let grads = task_gradients(&suite, &theta0, &Batch::Full).unwrap();
        let weights = solve_alpha(&grads, &prefs, &cfg).unwrap();
        let theta_star = suite.scalarized_minimizer(&weights.alpha).unwrap();
        let hg = hypergradient(
            &suite,
            &theta_star,
            &Batch::Full,
            &grads,
            &prefs,
            &weights,
            &(&theta_star - &target),
            &EXACT,
        )
        .unwrap();
        let fd = bilevel_fd(&spec, &theta0, prefs.probs(), &target, &cfg, 1e-6);
        let err = relative_error(hg.grad_p.as_slice(), fd.as_slice());
        assert!(err < 1e-4, "seed {seed}: {} vs {fd}", hg.grad_p);
    }
}

#[test]
fn neumann_error_decreases_with_steps() {
    let mut rng = rng(9);
    for _ in 0..20 {
        let d = rng.random_range(2..=32);
        let q = gaussian_matrix(d, d, &mut rng).qr().q();
        // spectrum pinned to [1, 5] so ‖I − ηH‖ = 0.82 and the error stays
        // above rounding through 32 steps
        let eig = DVector::from_fn(d, |i, _| match i {
            0 => 1.0,
            1 => 5.0,
            _ => rng.random_range(1.0..5.0),
        });
        let h = &q * DMatrix::from_diagonal(&eig) * q.transpose();
        let rhs = gaussian_vector(d, &mut rng);
        let exact = h.clone().cholesky().unwrap().solve(&rhs);
        let scale = 0.9 / eig.max();
        let mut last = f64::INFINITY;
        for steps in [1, 2, 4, 8, 16, 32] {
            let cfg = IhvpConfig {
                neumann_steps: steps,
                neumann_scale: Some(scale),
                mode: IhvpMode::Neumann,
            };
            let approx = ihvp(|v| Ok(&h * v), &rhs, &cfg).unwrap().value;
            let err = (&approx - &exact).norm() / exact.norm();
            assert!(err < last, "steps {steps}: {err} >= {last}");
            last = err;
        }
        let cfg = IhvpConfig {
            neumann_steps: 64,
            neumann_scale: Some(scale),
            mode: IhvpMode::Neumann,
        };
        let approx = ihvp(|v| Ok(&h * v), &rhs, &cfg).unwrap().value;
        assert!((&approx - &exact).norm() / exact.norm() <= 1e-3);
    }
}

/// Every illustrative task shares the same inputs, so the minimiser of
/// `Σ α_i ℓ_i` is the α-weighted mean of the per-task least-squares fits. At
/// that point more weight on the harmful task pulls the fit away from the
/// main optimum.
#[test]
fn harmful_task_hypergradient_is_positive_at_the_inner_optimum() {
    for seed in 0..3 {
        let (suite, _, heldout) = make_illustrative(1000, seed).unwrap();
        let val = LinearRegressionSuite::from_dataset(&heldout).unwrap();
        let fits: Vec<_> = (0..3).map(|t| suite.least_squares(t).unwrap()).collect();
        let prefs = PreferenceVector::uniform(3).unwrap();
        for init in [[0.0, 0.0], [-3.0, -1.0], [2.0, 2.0]] {
            let theta0 = DVector::from_column_slice(&init);
            let grads = task_gradients(&suite, &theta0, &Batch::Full).unwrap();
            let weights = solve_alpha(&grads, &prefs, &tight_solver()).unwrap();
            let theta = fits
                .iter()
                .zip(weights.alpha.iter())
                .fold(DVector::zeros(2), |acc, (w, a)| acc + w * *a)
                / weights.alpha.sum();
            let val_grad = val.grad(MAIN_TASK, &theta, &Batch::Full).unwrap();
            let hg = hypergradient(
                &suite,
                &theta,
                &Batch::Full,
                &grads,
                &prefs,
                &weights,
                &val_grad,
                &EXACT,
            )
            .unwrap();
            assert!(
                hg.grad_p[HARMFUL_TASK] > 0.0,
                "seed {seed}, init {init:?}: {}",
                hg.grad_p
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn logit_gradient_is_orthogonal_to_ones(seed in any::<u64>(), k in 2usize..=5) {
        let mut rng = rng(seed);
        let spec = random_quadratic_spec(k, k + 2, (0.5, 3.0), seed);
        let suite = make_quadratic(spec).unwrap();
        let theta = gaussian_vector(k + 2, &mut rng);
        let grads = task_gradients(&suite, &theta, &Batch::Full).unwrap();
        let prefs = PreferenceVector::from_probs(&random_simplex(k, &mut rng)).unwrap();
        let weights = solve_alpha(&grads, &prefs, &SolverConfig::default()).unwrap();
        prop_assume!(weights.converged);
        let val_grad = gaussian_vector(k + 2, &mut rng);
        let hg = hypergradient(
            &suite, &theta, &Batch::Full, &grads, &prefs, &weights, &val_grad,
            &IhvpConfig::default(),
        ).unwrap();
        let scale = hg.grad_logits.amax().max(1.0);
        prop_assert!(hg.grad_logits.sum().abs() < 1e-12 * scale * k as f64);
    }
}
