//! Recipe runners. Each writes its artifacts and then evaluates its checks by
//! re-reading them from disk.

use std::path::{Path, PathBuf};

use nalgebra::DVector;

use super::checks::{self, CheckResult};
use super::table::{cells, indexed, write_rows};
use super::{
    parallel_map, write_json, AblationParams, ConvergenceParams, ConvergenceSuite,
    DirectionsParams, IllustrativeParams, RecipeSpec, SteerParams,
};
use crate::bargaining::{
    solve_alpha, solve_nash_mtl, update_direction, PreferenceVector, TaskGradientSet,
};
use crate::diffmodels::{
    make_illustrative_with_noise, make_quadratic, make_toy_mlp, task_losses,
    two_task_quadratic_spec, Batch, LinearRegressionSuite, QuadraticSuiteSpec, TaskSuite,
    MAIN_TASK,
};
use crate::error::{Error, Result};
use crate::trainer::{
    nash_mtl_directions, train, train_single_task, TrainConfig, Trajectory, ValSource,
};

type RecipeOutput = (Vec<PathBuf>, Vec<CheckResult>);

pub(super) fn illustrative_paths(dir: &Path, seed: u64) -> [PathBuf; 4] {
    let stem = format!("illustrative_seed{seed}");
    [
        dir.join(format!("{stem}_trajectory.csv")),
        dir.join(format!("{stem}_path.csv")),
        dir.join(format!("{stem}_landscape.csv")),
        dir.join(format!("{stem}_verdict.json")),
    ]
}

/// Trains with learned preferences and a main-task-only baseline on the same
/// budget for every seed, then writes the preference trajectory, both
/// parameter paths, the main-loss landscape and the verdict.
pub fn run_illustrative(
    params: &IllustrativeParams,
    spec: &RecipeSpec,
    jobs: usize,
) -> Result<RecipeOutput> {
    let dir = &spec.output_dir;
    parallel_map(&spec.seeds, jobs, |&seed| {
        let (suite, _, _) = make_illustrative_with_noise(params.samples, seed, params.noise_scale)?;
        let cfg = TrainConfig {
            seed,
            ..spec.train.clone()
        };
        let init = DVector::from_column_slice(&params.init);
        let traj = train(
            &suite,
            &cfg,
            &init,
            &PreferenceVector::uniform(suite.num_tasks())?,
        )?;
        let baseline = train_single_task(&suite, MAIN_TASK, &cfg, &init)?;
        let [traj_path, path_path, landscape_path, _] = illustrative_paths(dir, seed);
        traj.write_csv(&traj_path)?;

        let header = ["method", "step", "w1", "w2"].map(String::from);
        let mut rows = Vec::with_capacity(traj.params.len() + baseline.path.len());
        for (method, path) in [("auxinash", &traj.params), ("main_only", &baseline.path)] {
            for (step, w) in path.iter().enumerate() {
                rows.push(vec![
                    method.to_string(),
                    step.to_string(),
                    w[0].to_string(),
                    w[1].to_string(),
                ]);
            }
        }
        write_rows(&path_path, &header, &rows)?;
        write_landscape(&suite, params, &landscape_path)?;
        Ok(())
    })?;

    let mut artifacts = Vec::new();
    let mut results = Vec::new();
    for &seed in &spec.seeds {
        let paths = illustrative_paths(dir, seed);
        let seed_checks =
            checks::check_illustrative(&paths[0], &paths[1], params.harmful_threshold)?
                .into_iter()
                .map(|c| c.with_seed(seed))
                .collect::<Vec<_>>();
        write_json(&paths[3], &seed_checks)?;
        results.extend(seed_checks);
        artifacts.extend(paths);
    }
    Ok((artifacts, results))
}

/// Main-task training loss over a regular grid of `W`.
fn write_landscape(
    suite: &LinearRegressionSuite,
    params: &IllustrativeParams,
    path: &Path,
) -> Result<()> {
    let [x0, x1, y0, y1] = params.landscape_bounds;
    let n = params.landscape_resolution;
    let at = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (n - 1) as f64;
    let header = ["w1", "w2", "main_loss"].map(String::from);
    let mut rows = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let w = DVector::from_vec(vec![at(x0, x1, i), at(y0, y1, j)]);
            let loss = suite.loss(MAIN_TASK, &w, &Batch::Full)?;
            rows.push(cells(&[w[0], w[1], loss]));
        }
    }
    write_rows(path, &header, &rows)
}

pub(super) fn steer_paths(dir: &Path) -> [PathBuf; 2] {
    [
        dir.join("steer_endpoints.csv"),
        dir.join("steer_nash_reference.csv"),
    ]
}

/// One fixed-preference run per grid value on the two-task quadratic, plus
/// the per-step comparison of the uniform run against Nash-MTL directions.
pub fn run_steer(params: &SteerParams, spec: &RecipeSpec, jobs: usize) -> Result<RecipeOutput> {
    let suite = make_quadratic(two_task_quadratic_spec())?;
    let cfg = TrainConfig {
        pref_lr: 0.0,
        seed: spec.seeds[0],
        ..spec.train.clone()
    };
    let init = DVector::from_column_slice(&params.init);
    let mut grid = params.grid.clone();
    let uniform_in_grid = grid.contains(&0.5);
    if !uniform_in_grid {
        grid.push(0.5);
    }
    let runs = parallel_map(&grid, jobs, |&p0| {
        let prefs = PreferenceVector::from_probs(&[p0, 1.0 - p0])?;
        train(&suite, &cfg, &init, &prefs)
    })?;

    let [endpoints_path, nash_path] = steer_paths(&spec.output_dir);
    let mut header = indexed("p", 2);
    header.extend(indexed("theta", 2));
    header.extend(indexed("loss", 2));
    header.extend(["steps", "termination"].map(String::from));
    let mut rows = Vec::new();
    for (&p0, traj) in grid.iter().zip(&runs).take(params.grid.len()) {
        let theta = DVector::from_column_slice(traj.final_params());
        let losses = task_losses(&suite, &theta, &Batch::Full)?;
        let mut row = cells(&[p0, 1.0 - p0, theta[0], theta[1], losses[0], losses[1]]);
        row.push(traj.records.len().to_string());
        row.push(termination_tag(traj).to_string());
        rows.push(row);
    }
    write_rows(&endpoints_path, &header, &rows)?;

    let uniform = &runs[grid
        .iter()
        .position(|&p| p == 0.5)
        .expect("uniform run present")];
    write_nash_reference(&suite, uniform, &cfg, &nash_path)?;

    let results = checks::check_steer(
        &endpoints_path,
        &nash_path,
        &two_task_quadratic_spec(),
        params,
    )?;
    Ok((vec![endpoints_path, nash_path], results))
}

fn write_nash_reference<S: TaskSuite>(
    suite: &S,
    traj: &Trajectory,
    cfg: &TrainConfig,
    path: &Path,
) -> Result<()> {
    let reference = nash_mtl_directions(suite, traj, &cfg.solver)?;
    let d = suite.param_dim();
    let mut header = vec!["step".to_string()];
    header.extend(indexed("dir", d));
    header.extend(indexed("nash", d));
    let rows: Vec<Vec<String>> = traj
        .directions
        .iter()
        .zip(&reference)
        .enumerate()
        .map(|(step, (dir, nash))| {
            let mut row = vec![step.to_string()];
            row.extend(cells(dir));
            row.extend(cells(nash.as_slice()));
            row
        })
        .collect();
    write_rows(path, &header, &rows)
}

fn termination_tag(traj: &Trajectory) -> &'static str {
    use crate::trainer::Termination::*;
    match traj.termination {
        Completed => "completed",
        ParetoStationary { .. } => "pareto_stationary",
        Diverged { .. } => "diverged",
        SolverFailed { .. } => "solver_failed",
    }
}

pub(super) fn directions_paths(dir: &Path) -> [PathBuf; 3] {
    [
        dir.join("directions_gradients.csv"),
        dir.join("directions.csv"),
        dir.join("directions_nash_mtl.csv"),
    ]
}

/// Interior points of the simplex with coordinates on the `1/resolution`
/// lattice, plus the uniform point.
pub(super) fn simplex_grid(k: usize, resolution: usize) -> Vec<Vec<f64>> {
    fn compositions(k: usize, total: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == 1 {
            prefix.push(total);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for first in 1..=total.saturating_sub(k - 1) {
            prefix.push(first);
            compositions(k - 1, total - first, prefix, out);
            prefix.pop();
        }
    }
    let mut parts = Vec::new();
    compositions(k, resolution, &mut Vec::new(), &mut parts);
    let uniform = vec![1.0 / k as f64; k];
    let mut grid: Vec<Vec<f64>> = parts
        .into_iter()
        .map(|c| {
            c.into_iter()
                .map(|x| x as f64 / resolution as f64)
                .collect()
        })
        .collect();
    if !grid.contains(&uniform) {
        grid.push(uniform);
    }
    grid
}

/// Bargaining directions over a preference grid for fixed gradients.
pub fn run_directions(params: &DirectionsParams, spec: &RecipeSpec) -> Result<RecipeOutput> {
    let grads = TaskGradientSet::new(&params.gradients)?;
    let k = grads.num_tasks();
    let d = grads.dim();
    let [grad_path, dir_path, nash_path] = directions_paths(&spec.output_dir);

    let mut header = vec!["task".to_string()];
    header.extend(indexed("g", d));
    let rows: Vec<Vec<String>> = params
        .gradients
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let mut row = vec![i.to_string()];
            row.extend(cells(g));
            row
        })
        .collect();
    write_rows(&grad_path, &header, &rows)?;

    let mut header = indexed("p", k);
    header.extend(indexed("alpha", k));
    header.extend(indexed("dir", d));
    header.extend(indexed("proj", k));
    header.push("residual".to_string());
    let mut rows = Vec::new();
    for p in simplex_grid(k, params.resolution) {
        let prefs = PreferenceVector::from_probs(&p)?;
        let weights = solve_alpha(&grads, &prefs, &spec.train.solver)?;
        let direction = update_direction(&grads, &weights)?;
        let proj = grads.project(&direction)?;
        let mut row = cells(prefs.probs().as_slice());
        row.extend(cells(weights.alpha.as_slice()));
        row.extend(cells(direction.as_slice()));
        row.extend(cells(proj.as_slice()));
        row.push(weights.residual_inf.to_string());
        rows.push(row);
    }
    write_rows(&dir_path, &header, &rows)?;

    let nash = solve_nash_mtl(&grads, &spec.train.solver)?;
    let nash_dir: DVector<f64> = grads.gradients() * &nash.alpha;
    write_rows(
        &nash_path,
        &indexed("dir", d),
        &[cells(nash_dir.as_slice())],
    )?;

    let results = checks::check_directions(&grad_path, &dir_path, &nash_path, params.tolerance)?;
    Ok((vec![grad_path, dir_path, nash_path], results))
}

pub(super) fn convergence_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("convergence_seed{seed}_trajectory.csv"))
}

fn single_task_quadratic_spec() -> QuadraticSuiteSpec {
    let two = two_task_quadratic_spec();
    QuadraticSuiteSpec {
        matrices: vec![two.matrices[0].clone()],
        centers: vec![two.centers[0].clone()],
    }
}

/// Guaranteed-descent step sizes on a smooth suite, checking monotone mean loss and
/// approach to Pareto stationarity.
pub fn run_convergence(
    params: &ConvergenceParams,
    spec: &RecipeSpec,
    jobs: usize,
) -> Result<RecipeOutput> {
    let dir = &spec.output_dir;
    parallel_map(&spec.seeds, jobs, |&seed| {
        let cfg = TrainConfig {
            seed,
            ..spec.train.clone()
        };
        let traj = match params.suite {
            ConvergenceSuite::TwoTaskQuadratic | ConvergenceSuite::SingleTaskQuadratic => {
                let qspec = if params.suite == ConvergenceSuite::TwoTaskQuadratic {
                    two_task_quadratic_spec()
                } else {
                    single_task_quadratic_spec()
                };
                let suite = make_quadratic(qspec)?;
                let init = init_or(&params.init, || DVector::from_vec(vec![2.0, 2.0]))?;
                train(
                    &suite,
                    &cfg,
                    &init,
                    &PreferenceVector::uniform(suite.num_tasks())?,
                )?
            }
            ConvergenceSuite::ToyMlp { hidden, tasks } => {
                let suite = make_toy_mlp(hidden, tasks, seed)?;
                let init = init_or(&params.init, || suite.init_params(seed))?;
                train(&suite, &cfg, &init, &PreferenceVector::uniform(tasks)?)?
            }
        };
        traj.write_csv(&convergence_path(dir, seed))
    })?;
    let mut artifacts = Vec::new();
    let mut results = Vec::new();
    for &seed in &spec.seeds {
        let path = convergence_path(dir, seed);
        results.extend(
            checks::check_convergence(&path, params.min_norm_target, params.monotone_fraction)?
                .into_iter()
                .map(|c| c.with_seed(seed)),
        );
        artifacts.push(path);
    }
    Ok((artifacts, results))
}

fn init_or(
    init: &Option<Vec<f64>>,
    default: impl FnOnce() -> DVector<f64>,
) -> Result<DVector<f64>> {
    match init {
        Some(v) if v.iter().all(|x| x.is_finite()) => Ok(DVector::from_column_slice(v)),
        Some(_) => Err(Error::NonFinite("initial parameters")),
        None => Ok(default()),
    }
}

pub(super) fn ablation_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("aux_set_ablation_seed{seed}.csv"))
}

/// Validation loss from a separate training batch on all data against a 10%
/// held-out auxiliary set, with main-only baselines on matching data.
pub fn run_aux_set_ablation(
    params: &AblationParams,
    spec: &RecipeSpec,
    jobs: usize,
) -> Result<RecipeOutput> {
    let dir = &spec.output_dir;
    parallel_map(&spec.seeds, jobs, |&seed| {
        let (suite, _, heldout) = make_illustrative_with_noise(params.samples, seed, 1.0)?;
        let eval = LinearRegressionSuite::from_dataset(&heldout)?;
        let init = DVector::from_column_slice(&params.init);
        let prefs = PreferenceVector::uniform(suite.num_tasks())?;
        let full = TrainConfig {
            seed,
            val_source: ValSource::SeparateTrainBatch,
            ..spec.train.clone()
        };
        let partial = TrainConfig {
            val_source: ValSource::HeldoutSet,
            ..full.clone()
        };
        let fraction = 1.0 - partial.heldout_fraction;
        let heldout_loss =
            |theta: &[f64]| eval.loss(MAIN_TASK, &DVector::from_column_slice(theta), &Batch::Full);
        let baseline = |cfg: &TrainConfig| -> Result<f64> {
            let mut total = 0.0;
            for r in 0..params.baseline_replicates {
                let cfg = TrainConfig {
                    seed: replicate_seed(seed, r),
                    ..cfg.clone()
                };
                total += heldout_loss(&train_single_task(&suite, MAIN_TASK, &cfg, &init)?.params)?;
            }
            Ok(total / params.baseline_replicates as f64)
        };
        let rows = vec![
            (
                "auxinash_full",
                1.0,
                1,
                heldout_loss(train(&suite, &full, &init, &prefs)?.final_params())?,
            ),
            (
                "auxinash_aux_set",
                fraction,
                1,
                heldout_loss(train(&suite, &partial, &init, &prefs)?.final_params())?,
            ),
            (
                "stl_full",
                1.0,
                params.baseline_replicates,
                baseline(&full)?,
            ),
            (
                "stl_partial",
                fraction,
                params.baseline_replicates,
                baseline(&partial)?,
            ),
        ]
        .into_iter()
        .map(|(name, frac, reps, loss)| {
            vec![
                name.to_string(),
                frac.to_string(),
                reps.to_string(),
                loss.to_string(),
            ]
        })
        .collect::<Vec<_>>();
        let header = [
            "variant",
            "data_fraction",
            "replicates",
            "main_heldout_loss",
        ]
        .map(String::from);
        write_rows(&ablation_path(dir, seed), &header, &rows)
    })?;
    let mut artifacts = Vec::new();
    let mut results = Vec::new();
    for &seed in &spec.seeds {
        let path = ablation_path(dir, seed);
        results.extend(
            checks::check_ablation(&path)?
                .into_iter()
                .map(|c| c.with_seed(seed)),
        );
        artifacts.push(path);
    }
    Ok((artifacts, results))
}

/// Seed of the `r`-th baseline replicate for a run seed.
fn replicate_seed(seed: u64, r: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(r as u64 + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simplex_grid_is_interior() {
        let grid = simplex_grid(3, 5);
        assert_eq!(grid.len(), 7);
        for p in &grid {
            assert!(p.iter().all(|&x| x > 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(simplex_grid(2, 2), vec![vec![0.5, 0.5]]);
    }
}
