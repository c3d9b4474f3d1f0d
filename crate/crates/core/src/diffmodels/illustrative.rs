//! The three-task linear-regression problem with a shared weight vector
//! `W ∈ R²`: a noisy main task, a low-noise helpful auxiliary with the same
//! optimum and a low-noise harmful auxiliary with a different optimum.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{check_params, check_task, Batch, TaskSuite};
use crate::error::{Error, Result};
use crate::linalg;

pub const MAIN_TASK: usize = 0;
pub const HELPFUL_TASK: usize = 1;
pub const HARMFUL_TASK: usize = 2;

/// Shared optimum of the main and helpful tasks.
pub const MAIN_OPTIMUM: [f64; 2] = [1.0, 1.0];
pub const HARMFUL_OPTIMUM: [f64; 2] = [-1.0, -4.0];
pub const SIGMA_HELPFUL: f64 = 0.25;
pub const SIGMA_HARMFUL: f64 = 0.25;
pub const SIGMA_MAIN: f64 = 20.0 * SIGMA_HELPFUL;

const INPUT_RANGE: f64 = 2.0;

/// Inputs and the three target columns.
#[derive(Debug, Clone, PartialEq)]
pub struct IllustrativeDataset {
    pub inputs: DMatrix<f64>,
    pub main_targets: DVector<f64>,
    pub helpful_targets: DVector<f64>,
    pub harmful_targets: DVector<f64>,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    x1: f64,
    x2: f64,
    y_main: f64,
    y_helpful: f64,
    y_harmful: f64,
}

impl IllustrativeDataset {
    fn generate(n: usize, rng: &mut ChaCha8Rng, noise_scale: f64, seed: u64) -> Result<Self> {
        let noise = |sigma: f64| {
            Normal::new(0.0, sigma * noise_scale)
                .map_err(|e| Error::InvalidConfig(format!("noise scale: {e}")))
        };
        let main_noise = noise(SIGMA_MAIN)?;
        let helpful_noise = noise(SIGMA_HELPFUL)?;
        let harmful_noise = noise(SIGMA_HARMFUL)?;
        let mut inputs = DMatrix::zeros(n, 2);
        let mut main = DVector::zeros(n);
        let mut helpful = DVector::zeros(n);
        let mut harmful = DVector::zeros(n);
        for r in 0..n {
            let x1 = rng.random_range(-INPUT_RANGE..=INPUT_RANGE);
            let x2 = rng.random_range(-INPUT_RANGE..=INPUT_RANGE);
            inputs[(r, 0)] = x1;
            inputs[(r, 1)] = x2;
            let clean = x1 * MAIN_OPTIMUM[0] + x2 * MAIN_OPTIMUM[1];
            main[r] = clean + main_noise.sample(rng);
            helpful[r] = clean + helpful_noise.sample(rng);
            harmful[r] =
                x1 * HARMFUL_OPTIMUM[0] + x2 * HARMFUL_OPTIMUM[1] + harmful_noise.sample(rng);
        }
        Ok(Self {
            inputs,
            main_targets: main,
            helpful_targets: helpful,
            harmful_targets: harmful,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    /// The rows listed in `rows`, in that order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(rows),
            main_targets: self.main_targets.select_rows(rows),
            helpful_targets: self.helpful_targets.select_rows(rows),
            harmful_targets: self.harmful_targets.select_rows(rows),
            seed: self.seed,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in 0..self.len() {
            w.serialize(CsvRow {
                x1: self.inputs[(r, 0)],
                x2: self.inputs[(r, 1)],
                y_main: self.main_targets[r],
                y_helpful: self.helpful_targets[r],
                y_harmful: self.harmful_targets[r],
            })?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a dataset written by [`write_csv`](Self::write_csv). The seed is
    /// not stored in the file and must be supplied.
    pub fn read_csv(path: &Path, seed: u64) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let rows: Vec<CsvRow> = reader
            .deserialize()
            .collect::<std::result::Result<_, _>>()?;
        if rows.is_empty() {
            return Err(Error::Empty("illustrative dataset"));
        }
        let n = rows.len();
        Ok(Self {
            inputs: DMatrix::from_fn(n, 2, |r, c| if c == 0 { rows[r].x1 } else { rows[r].x2 }),
            main_targets: DVector::from_fn(n, |r, _| rows[r].y_main),
            helpful_targets: DVector::from_fn(n, |r, _| rows[r].y_helpful),
            harmful_targets: DVector::from_fn(n, |r, _| rows[r].y_harmful),
            seed,
        })
    }
}

/// Builds the suite on `n` training points together with an independently
/// drawn held-out set of the same size.
pub fn make_illustrative(
    n: usize,
    seed: u64,
) -> Result<(
    LinearRegressionSuite,
    IllustrativeDataset,
    IllustrativeDataset,
)> {
    make_illustrative_with_noise(n, seed, 1.0)
}

/// As [`make_illustrative`] with every noise level multiplied by
/// `noise_scale` (0 gives noiseless targets).
pub fn make_illustrative_with_noise(
    n: usize,
    seed: u64,
    noise_scale: f64,
) -> Result<(
    LinearRegressionSuite,
    IllustrativeDataset,
    IllustrativeDataset,
)> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!(
            "illustrative problem needs n >= 2, got {n}"
        )));
    }
    if !(noise_scale.is_finite() && noise_scale >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "noise scale must be finite and non-negative, got {noise_scale}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = IllustrativeDataset::generate(n, &mut rng, noise_scale, seed)?;
    let heldout = IllustrativeDataset::generate(n, &mut rng, noise_scale, seed)?;
    let suite = LinearRegressionSuite::from_dataset(&train)?;
    Ok((suite, train, heldout))
}

/// Population gradient of the mean squared error of a task with optimum
/// `task_optimum` at `w`, for inputs uniform on `[−2, 2]²`:
/// `E[xxᵀ] = (4/3)I`, so `∇ = (8/3)(w − w_task)`.
pub fn population_gradient(task_optimum: [f64; 2], w: &DVector<f64>) -> DVector<f64> {
    let second_moment = INPUT_RANGE * INPUT_RANGE / 3.0;
    DVector::from_fn(2, |i, _| 2.0 * second_moment * (w[i] - task_optimum[i]))
}

/// Mean-squared-error linear regression tasks sharing one weight vector.
#[derive(Debug, Clone)]
pub struct LinearRegressionSuite {
    inputs: DMatrix<f64>,
    /// n×K, one column per task.
    targets: DMatrix<f64>,
    smoothness: f64,
}

impl LinearRegressionSuite {
    pub fn new(inputs: DMatrix<f64>, targets: DMatrix<f64>) -> Result<Self> {
        if inputs.nrows() == 0 || inputs.ncols() == 0 || targets.ncols() == 0 {
            return Err(Error::Empty("regression data"));
        }
        if inputs.nrows() != targets.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} input rows and {} target rows",
                inputs.nrows(),
                targets.nrows()
            )));
        }
        if !inputs.iter().chain(targets.iter()).all(|x| x.is_finite()) {
            return Err(Error::NonFinite("regression data"));
        }
        let n = inputs.nrows() as f64;
        let (_, lmax) = linalg::symmetric_eigen_range(&(inputs.transpose() * &inputs));
        Ok(Self {
            inputs,
            targets,
            smoothness: 2.0 * lmax / n,
        })
    }

    pub fn from_dataset(data: &IllustrativeDataset) -> Result<Self> {
        let targets = DMatrix::from_columns(&[
            data.main_targets.clone(),
            data.helpful_targets.clone(),
            data.harmful_targets.clone(),
        ]);
        Self::new(data.inputs.clone(), targets)
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn targets(&self) -> &DMatrix<f64> {
        &self.targets
    }

    /// Restricts the suite to the listed rows.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        Self::new(
            self.inputs.select_rows(rows),
            self.targets.select_rows(rows),
        )
    }

    /// Least-squares solution for one task on the full data.
    pub fn least_squares(&self, task: usize) -> Result<DVector<f64>> {
        check_task(self, task)?;
        let xtx = self.inputs.transpose() * &self.inputs;
        let xty = self.inputs.transpose() * self.targets.column(task);
        linalg::cholesky_solve_vec(&xtx, &xty)
    }
}

impl TaskSuite for LinearRegressionSuite {
    fn num_tasks(&self) -> usize {
        self.targets.ncols()
    }

    fn param_dim(&self) -> usize {
        self.inputs.ncols()
    }

    fn num_samples(&self) -> usize {
        self.inputs.nrows()
    }

    fn loss(&self, task: usize, theta: &DVector<f64>, batch: &Batch) -> Result<f64> {
        check_task(self, task)?;
        check_params(self, theta)?;
        let rows = batch.indices(self.num_samples())?;
        let total: f64 = rows
            .iter()
            .map(|&r| {
                let e = self.inputs.row(r).dot(&theta.transpose()) - self.targets[(r, task)];
                e * e
            })
            .sum();
        Ok(total / rows.len() as f64)
    }

    fn grad(&self, task: usize, theta: &DVector<f64>, batch: &Batch) -> Result<DVector<f64>> {
        check_task(self, task)?;
        check_params(self, theta)?;
        let rows = batch.indices(self.num_samples())?;
        let mut g = DVector::zeros(theta.len());
        for &r in &rows {
            let x = self.inputs.row(r);
            let e = x.dot(&theta.transpose()) - self.targets[(r, task)];
            g += x.transpose() * e;
        }
        Ok(g * (2.0 / rows.len() as f64))
    }

    fn hvp(
        &self,
        alpha: &DVector<f64>,
        theta: &DVector<f64>,
        v: &DVector<f64>,
        batch: &Batch,
    ) -> Result<DVector<f64>> {
        check_params(self, theta)?;
        check_params(self, v)?;
        if alpha.len() != self.num_tasks() {
            return Err(Error::DimensionMismatch(format!(
                "{} task weights for {} tasks",
                alpha.len(),
                self.num_tasks()
            )));
        }
        let rows = batch.indices(self.num_samples())?;
        let mut out = DVector::zeros(v.len());
        for &r in &rows {
            let x = self.inputs.row(r);
            out += x.transpose() * x.dot(&v.transpose());
        }
        Ok(out * (2.0 * alpha.sum() / rows.len() as f64))
    }

    /// Curvature bound of the full-data losses; minibatches can exceed it.
    fn smoothness_bound(&self) -> Option<f64> {
        Some(self.smoothness)
    }
}
