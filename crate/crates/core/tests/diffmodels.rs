mod common;

use auxinash::bargaining::TaskGradientSet;
use auxinash::diffmodels::{
    finite_difference_hvp, make_illustrative, make_illustrative_with_noise, make_quadratic,
    make_toy_mlp, population_gradient, random_quadratic_spec, task_gradients, Batch,
    IllustrativeDataset, QuadraticSuiteSpec, TaskSuite, ToyMlpSuite, HARMFUL_OPTIMUM, MAIN_OPTIMUM,
    MAIN_TASK, SIGMA_HARMFUL, SIGMA_HELPFUL, SIGMA_MAIN,
};
use auxinash::linalg::smallest_singular_value;
use auxinash::trainer::pareto_stationarity;
use auxinash::{DMatrix, DVector};
use common::*;

fn central_gradient<S: TaskSuite>(suite: &S, task: usize, theta: &DVector<f64>) -> DVector<f64> {
    let h = 1e-6;
    DVector::from_fn(theta.len(), |j, _| {
        let mut up = theta.clone();
        let mut down = theta.clone();
        up[j] += h;
        down[j] -= h;
        (suite.loss(task, &up, &Batch::Full).unwrap()
            - suite.loss(task, &down, &Batch::Full).unwrap())
            / (2.0 * h)
    })
}

fn check_gradients<S: TaskSuite>(suite: &S, seed: u64) {
    let mut rng = rng(seed);
    for _ in 0..10 {
        let theta = gaussian_vector(suite.param_dim(), &mut rng);
        for task in 0..suite.num_tasks() {
            let analytic = suite.grad(task, &theta, &Batch::Full).unwrap();
            let numeric = central_gradient(suite, task, &theta);
            let err = relative_error(analytic.as_slice(), numeric.as_slice());
            assert!(err <= 1e-5, "task {task}: {err}");
        }
    }
}

fn check_hvp_symmetry<S: TaskSuite>(suite: &S, seed: u64) {
    let mut rng = rng(seed);
    let d = suite.param_dim();
    for _ in 0..10 {
        let alpha = random_simplex(suite.num_tasks(), &mut rng);
        let alpha = DVector::from_vec(alpha);
        let theta = gaussian_vector(d, &mut rng);
        let u = gaussian_vector(d, &mut rng);
        let v = gaussian_vector(d, &mut rng);
        let uhv = u.dot(&suite.hvp(&alpha, &theta, &v, &Batch::Full).unwrap());
        let vhu = v.dot(&suite.hvp(&alpha, &theta, &u, &Batch::Full).unwrap());
        assert!((uhv - vhu).abs() <= 1e-8 * uhv.abs().max(vhu.abs()).max(1.0));
    }
}

#[test]
fn every_suite_passes_gradient_checks() {
    check_gradients(
        &make_quadratic(random_quadratic_spec(3, 6, (0.5, 4.0), 1)).unwrap(),
        1,
    );
    check_gradients(&make_illustrative(200, 2).unwrap().0, 2);
    check_gradients(&make_toy_mlp(6, 3, 3).unwrap(), 3);
}

#[test]
fn every_suite_has_a_symmetric_hvp() {
    check_hvp_symmetry(
        &make_quadratic(random_quadratic_spec(3, 6, (0.5, 4.0), 4)).unwrap(),
        4,
    );
    check_hvp_symmetry(&make_illustrative(200, 5).unwrap().0, 5);
    check_hvp_symmetry(&make_toy_mlp(6, 3, 6).unwrap(), 6);
}

#[test]
fn quadratic_examples() {
    let unit = make_quadratic(QuadraticSuiteSpec {
        matrices: vec![DMatrix::identity(3, 3)],
        centers: vec![DVector::zeros(3)],
    })
    .unwrap();
    let theta = DVector::from_vec(vec![0.3, -1.0, 2.0]);
    let v = DVector::from_vec(vec![1.0, 4.0, -0.5]);
    assert_eq!(unit.grad(0, &theta, &Batch::Full).unwrap(), theta);
    let one = DVector::from_element(1, 1.0);
    assert!((unit.hvp(&one, &theta, &v, &Batch::Full).unwrap() - &v).amax() < 1e-15);
    assert_eq!(unit.smoothness_bound(), Some(1.0));

    let suite = make_quadratic(random_quadratic_spec(3, 5, (0.5, 3.0), 12)).unwrap();
    let mut rng = rng(12);
    for _ in 0..10 {
        let alpha = DVector::from_vec(random_simplex(3, &mut rng));
        let theta = gaussian_vector(5, &mut rng);
        let v = gaussian_vector(5, &mut rng);
        let exact = suite.hvp(&alpha, &theta, &v, &Batch::Full).unwrap();
        let fd = finite_difference_hvp(&suite, &alpha, &theta, &v, &Batch::Full).unwrap();
        assert!(relative_error(exact.as_slice(), fd.as_slice()) <= 1e-6);
    }
}

#[test]
fn non_spd_matrices_are_rejected() {
    let bad = QuadraticSuiteSpec {
        matrices: vec![DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])],
        centers: vec![DVector::zeros(2)],
    };
    assert!(make_quadratic(bad).is_err());
    let asym = QuadraticSuiteSpec {
        matrices: vec![DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0])],
        centers: vec![DVector::zeros(2)],
    };
    assert!(make_quadratic(asym).is_err());
}

#[test]
fn segment_between_centers_is_pareto_stationary() {
    let suite = make_quadratic(QuadraticSuiteSpec {
        matrices: vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2)],
        centers: vec![
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![0.0, 1.0]),
        ],
    })
    .unwrap();
    for i in 1..10 {
        let t = i as f64 / 10.0;
        let theta = DVector::from_vec(vec![t, 1.0 - t]);
        let grads = task_gradients(&suite, &theta, &Batch::Full).unwrap();
        assert!(pareto_stationarity(&grads).min_norm_combo <= 1e-8);
    }
    // points off the segment are not
    let grads = task_gradients(&suite, &DVector::from_vec(vec![1.0, 1.0]), &Batch::Full).unwrap();
    assert!(pareto_stationarity(&grads).min_norm_combo > 0.1);
}

#[test]
fn weighted_minimisers_of_general_quadratics_are_pareto_stationary() {
    let spec = random_quadratic_spec(3, 4, (0.5, 3.0), 30);
    let suite = make_quadratic(spec).unwrap();
    let mut rng = rng(30);
    for _ in 0..10 {
        let w = DVector::from_vec(random_simplex(3, &mut rng));
        let theta = suite.scalarized_minimizer(&w).unwrap();
        let grads = task_gradients(&suite, &theta, &Batch::Full).unwrap();
        assert!(pareto_stationarity(&grads).min_norm_combo <= 1e-8);
    }
}

#[test]
fn illustrative_constants() {
    assert_eq!(MAIN_OPTIMUM, [1.0, 1.0]);
    assert_eq!(HARMFUL_OPTIMUM, [-1.0, -4.0]);
    assert_eq!(SIGMA_HELPFUL, 0.25);
    assert_eq!(SIGMA_HARMFUL, 0.25);
    assert_eq!(SIGMA_MAIN, 5.0);
    assert_eq!(SIGMA_MAIN, 20.0 * SIGMA_HELPFUL);
}

#[test]
fn illustrative_data_regenerates_bit_identically() {
    let (_, a, ha) = make_illustrative(300, 8).unwrap();
    let (_, b, hb) = make_illustrative(300, 8).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    assert_ne!(a, ha);
    let (_, c, _) = make_illustrative(300, 9).unwrap();
    assert_ne!(a, c);
    assert!(a.inputs.iter().all(|x| x.abs() <= 2.0));
    assert!(make_illustrative(1, 0).is_err());
}

#[test]
fn illustrative_csv_round_trip() {
    let (_, data, _) = make_illustrative(50, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    data.write_csv(&path).unwrap();
    let header = std::fs::read_to_string(&path).unwrap();
    assert!(header.starts_with("x1,x2,y_main,y_helpful,y_harmful"));
    let back = IllustrativeDataset::read_csv(&path, 3).unwrap();
    assert_eq!(back, data);
}

#[test]
fn noiseless_main_loss_vanishes_at_the_optimum() {
    let (suite, _, _) = make_illustrative_with_noise(100, 4, 0.0).unwrap();
    let optimum = DVector::from_column_slice(&MAIN_OPTIMUM);
    assert!(suite.loss(MAIN_TASK, &optimum, &Batch::Full).unwrap() < 1e-28);
    let fit = suite.least_squares(MAIN_TASK).unwrap();
    assert!((fit - optimum).amax() < 1e-12);
}

#[test]
fn harmful_population_gradient_opposes_main_descent() {
    // population main loss is (4/3)‖w − W*‖² plus noise, with gradient
    // (8/3)(w − W*)
    let optimum = DVector::from_column_slice(&MAIN_OPTIMUM);
    let harmful_at_opt = population_gradient(HARMFUL_OPTIMUM, &optimum);
    assert!((&harmful_at_opt - DVector::from_vec(vec![16.0 / 3.0, 40.0 / 3.0])).amax() < 1e-12);
    assert_eq!(population_gradient(MAIN_OPTIMUM, &optimum).norm(), 0.0);
    // at the origin, descending the harmful task moves against main descent
    let start = DVector::zeros(2);
    let main_descent = -population_gradient(MAIN_OPTIMUM, &start);
    let harmful_descent = -population_gradient(HARMFUL_OPTIMUM, &start);
    assert!(main_descent.dot(&harmful_descent) < 0.0);
    // empirical gradients agree with the population oracle for large n
    let (suite, _, _) = make_illustrative_with_noise(20000, 1, 0.0).unwrap();
    let w = DVector::from_vec(vec![0.3, -0.2]);
    for (task, opt) in [(0, MAIN_OPTIMUM), (2, HARMFUL_OPTIMUM)] {
        let empirical = suite.grad(task, &w, &Batch::Full).unwrap();
        let population = population_gradient(opt, &w);
        assert!(relative_error(empirical.as_slice(), population.as_slice()) < 0.05);
    }
}

#[test]
fn harmful_and_main_population_gradients_conflict_between_the_optima() {
    // on the open segment between the two optima the gradients are exactly
    // opposite, cosine −1
    let optimum = DVector::from_column_slice(&MAIN_OPTIMUM);
    let harmful = DVector::from_column_slice(&HARMFUL_OPTIMUM);
    for i in 1..10 {
        let t = i as f64 / 10.0;
        let w = &optimum * (1.0 - t) + &harmful * t;
        let gm = population_gradient(MAIN_OPTIMUM, &w);
        let gh = population_gradient(HARMFUL_OPTIMUM, &w);
        let cos = gm.dot(&gh) / (gm.norm() * gh.norm());
        assert!((cos + 1.0).abs() < 1e-12);
    }
}

#[test]
fn dead_mlp_reduces_to_target_energy() {
    let inputs = DMatrix::from_fn(8, 3, |r, c| ((r * 3 + c) as f64).sin());
    let targets = DMatrix::from_fn(8, 2, |r, c| (r as f64 * 0.7 + c as f64).cos());
    let suite = ToyMlpSuite::with_data(4, inputs, targets.clone()).unwrap();
    let theta = DVector::zeros(suite.param_dim());
    let zero_targets =
        ToyMlpSuite::with_data(4, DMatrix::from_element(8, 3, 1.0), DMatrix::zeros(8, 2)).unwrap();
    for k in 0..2 {
        let energy = targets.column(k).map(|y| y * y).mean();
        assert!((suite.loss(k, &theta, &Batch::Full).unwrap() - energy).abs() < 1e-15);
        assert_eq!(zero_targets.loss(k, &theta, &Batch::Full).unwrap(), 0.0);
        let g = zero_targets.grad(k, &theta, &Batch::Full).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }
}

#[test]
fn mlp_task_gradients_are_linearly_independent() {
    for seed in 0..5 {
        let suite = make_toy_mlp(8, 3, seed).unwrap();
        let theta = suite.init_params(seed + 100);
        let grads: TaskGradientSet = task_gradients(&suite, &theta, &Batch::Full).unwrap();
        assert!(smallest_singular_value(grads.gradients()) > 1e-6);
    }
    assert!(make_toy_mlp(0, 2, 0).is_err());
    assert!(make_toy_mlp(4, 1, 0).is_err());
}

#[test]
fn batches_select_rows() {
    let (suite, _, _) = make_illustrative(10, 0).unwrap();
    let theta = DVector::from_vec(vec![0.5, 0.5]);
    let full = suite.loss(0, &theta, &Batch::Full).unwrap();
    let mean_of_singles: f64 = (0..10)
        .map(|r| suite.loss(0, &theta, &Batch::Indices(vec![r])).unwrap())
        .sum::<f64>()
        / 10.0;
    assert!((full - mean_of_singles).abs() < 1e-12);
    assert!(suite.loss(0, &theta, &Batch::Indices(vec![10])).is_err());
}
