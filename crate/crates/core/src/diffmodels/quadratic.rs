//! Quadratic tasks `ℓ_i(θ) = ½(θ − c_i)ᵀA_i(θ − c_i)` with SPD `A_i`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{check_params, check_task, Batch, TaskSuite};
use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSuiteSpec {
    pub matrices: Vec<DMatrix<f64>>,
    pub centers: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct QuadraticSuite {
    matrices: Vec<DMatrix<f64>>,
    centers: Vec<DVector<f64>>,
    smoothness: f64,
    min_curvature: f64,
}

/// Validates the spec (square, symmetric, positive definite, matching
/// centers) and builds the suite.
pub fn make_quadratic(spec: QuadraticSuiteSpec) -> Result<QuadraticSuite> {
    let QuadraticSuiteSpec { matrices, centers } = spec;
    if matrices.is_empty() {
        return Err(Error::Empty("quadratic task list"));
    }
    if matrices.len() != centers.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} matrices and {} centers",
            matrices.len(),
            centers.len()
        )));
    }
    let d = centers[0].len();
    if d == 0 {
        return Err(Error::Empty("quadratic center"));
    }
    let mut smoothness = 0.0_f64;
    let mut min_curvature = f64::INFINITY;
    for (i, (a, c)) in matrices.iter().zip(&centers).enumerate() {
        if a.nrows() != d || a.ncols() != d || c.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "task {i}: matrix {}x{}, center {}, expected dimension {d}",
                a.nrows(),
                a.ncols(),
                c.len()
            )));
        }
        if !a.iter().chain(c.iter()).all(|x| x.is_finite()) {
            return Err(Error::NonFinite("quadratic spec"));
        }
        let asym = (a - a.transpose()).amax();
        if asym > 1e-12 * a.amax().max(1.0) {
            return Err(Error::InvalidConfig(format!(
                "matrix {i} is not symmetric (asymmetry {asym:e})"
            )));
        }
        let (lo, hi) = linalg::symmetric_eigen_range(a);
        if lo <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "matrix {i} is not positive definite (smallest eigenvalue {lo:e})"
            )));
        }
        smoothness = smoothness.max(hi);
        min_curvature = min_curvature.min(lo);
    }
    Ok(QuadraticSuite {
        matrices,
        centers,
        smoothness,
        min_curvature,
    })
}

/// Random SPD matrices with eigenvalues drawn uniformly from `eig_range`
/// and standard normal centers.
pub fn random_quadratic_spec(
    tasks: usize,
    dim: usize,
    eig_range: (f64, f64),
    seed: u64,
) -> QuadraticSuiteSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut matrices = Vec::with_capacity(tasks);
    let mut centers = Vec::with_capacity(tasks);
    for _ in 0..tasks {
        let raw: DMatrix<f64> = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(&mut rng));
        let q = raw.qr().q();
        let eig = DVector::from_fn(dim, |_, _| rng.random_range(eig_range.0..=eig_range.1));
        let a = &q * DMatrix::from_diagonal(&eig) * q.transpose();
        matrices.push((&a + a.transpose()) * 0.5);
        centers.push(DVector::from_fn(dim, |_, _| {
            StandardNormal.sample(&mut rng)
        }));
    }
    QuadraticSuiteSpec { matrices, centers }
}

/// The fixed two-task problem in R² used by the steering and convergence
/// recipes: anisotropic, correlated curvatures with centers `(1, 0)` and
/// `(0, 1)`.
pub fn two_task_quadratic_spec() -> QuadraticSuiteSpec {
    QuadraticSuiteSpec {
        matrices: vec![
            DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, -0.4, -0.4, 3.0]),
        ],
        centers: vec![
            DVector::from_row_slice(&[1.0, 0.0]),
            DVector::from_row_slice(&[0.0, 1.0]),
        ],
    }
}

impl QuadraticSuite {
    pub fn matrix(&self, task: usize) -> &DMatrix<f64> {
        &self.matrices[task]
    }

    pub fn center(&self, task: usize) -> &DVector<f64> {
        &self.centers[task]
    }

    /// Smallest eigenvalue over all `A_i`.
    pub fn min_curvature(&self) -> f64 {
        self.min_curvature
    }

    /// Minimiser of `Σ w_i ℓ_i` for non-negative weights, which is the Pareto
    /// optimal point `(Σ w_i A_i)⁻¹ Σ w_i A_i c_i`.
    pub fn scalarized_minimizer(&self, weights: &DVector<f64>) -> Result<DVector<f64>> {
        if weights.len() != self.matrices.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {} tasks",
                weights.len(),
                self.matrices.len()
            )));
        }
        let d = self.centers[0].len();
        let mut lhs = DMatrix::zeros(d, d);
        let mut rhs = DVector::zeros(d);
        for ((a, c), &w) in self.matrices.iter().zip(&self.centers).zip(weights.iter()) {
            lhs += w * a;
            rhs += w * (a * c);
        }
        linalg::cholesky_solve_vec(&lhs, &rhs)
    }
}

impl TaskSuite for QuadraticSuite {
    fn num_tasks(&self) -> usize {
        self.matrices.len()
    }

    fn param_dim(&self) -> usize {
        self.centers[0].len()
    }

    fn num_samples(&self) -> usize {
        1
    }

    fn loss(&self, task: usize, theta: &DVector<f64>, _batch: &Batch) -> Result<f64> {
        check_task(self, task)?;
        check_params(self, theta)?;
        let r = theta - &self.centers[task];
        Ok(0.5 * r.dot(&(&self.matrices[task] * &r)))
    }

    fn grad(&self, task: usize, theta: &DVector<f64>, _batch: &Batch) -> Result<DVector<f64>> {
        check_task(self, task)?;
        check_params(self, theta)?;
        Ok(&self.matrices[task] * (theta - &self.centers[task]))
    }

    fn hvp(
        &self,
        alpha: &DVector<f64>,
        theta: &DVector<f64>,
        v: &DVector<f64>,
        _batch: &Batch,
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
        let mut out = DVector::zeros(v.len());
        for (a, &w) in self.matrices.iter().zip(alpha.iter()) {
            out.gemv(w, a, v, 1.0);
        }
        Ok(out)
    }

    fn smoothness_bound(&self) -> Option<f64> {
        Some(self.smoothness)
    }
}
