//! Desk-scale differentiable multi-task problems.
//!
//! A [`TaskSuite`] exposes per-task losses, gradients and Hessian-vector
//! products of the weighted training objective `L_T(θ, α) = Σ α_i ℓ_i(θ)`.
//! Suites without closed-form second derivatives fall back to central
//! differences of the gradient.

mod illustrative;
mod mlp;
mod quadratic;

use std::ops::Range;

use nalgebra::DVector;

use crate::bargaining::TaskGradientSet;
use crate::error::{Error, Result};

pub use illustrative::{
    make_illustrative, make_illustrative_with_noise, population_gradient, IllustrativeDataset,
    LinearRegressionSuite, HARMFUL_OPTIMUM, HARMFUL_TASK, HELPFUL_TASK, MAIN_OPTIMUM, MAIN_TASK,
    SIGMA_HARMFUL, SIGMA_HELPFUL, SIGMA_MAIN,
};
pub use mlp::{make_toy_mlp, ToyMlpSuite};
pub use quadratic::{
    make_quadratic, random_quadratic_spec, two_task_quadratic_spec, QuadraticSuite,
    QuadraticSuiteSpec,
};

/// Which samples a loss or gradient evaluation averages over.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Batch {
    #[default]
    Full,
    Range(Range<usize>),
    Indices(Vec<usize>),
}

impl Batch {
    /// Resolves the batch against a dataset of `n` samples.
    pub fn indices(&self, n: usize) -> Result<Vec<usize>> {
        let idx: Vec<usize> = match self {
            Batch::Full => (0..n).collect(),
            Batch::Range(r) => r.clone().collect(),
            Batch::Indices(v) => v.clone(),
        };
        if idx.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::DimensionMismatch(format!(
                "batch index {bad} out of range for {n} samples"
            )));
        }
        Ok(idx)
    }
}

/// A differentiable multi-objective problem over a shared parameter vector.
pub trait TaskSuite: Send + Sync {
    fn num_tasks(&self) -> usize;

    fn param_dim(&self) -> usize;

    /// Number of samples addressable by a [`Batch`]; 1 for data-free suites.
    fn num_samples(&self) -> usize;

    fn loss(&self, task: usize, theta: &DVector<f64>, batch: &Batch) -> Result<f64>;

    fn grad(&self, task: usize, theta: &DVector<f64>, batch: &Batch) -> Result<DVector<f64>>;

    /// `(Σ α_i ∇²ℓ_i(θ)) v`.
    fn hvp(
        &self,
        alpha: &DVector<f64>,
        theta: &DVector<f64>,
        v: &DVector<f64>,
        batch: &Batch,
    ) -> Result<DVector<f64>> {
        finite_difference_hvp(self, alpha, theta, v, batch)
    }

    /// A known gradient Lipschitz constant for every task, if available.
    fn smoothness_bound(&self) -> Option<f64> {
        None
    }
}

fn check_task(suite: &(impl TaskSuite + ?Sized), task: usize) -> Result<()> {
    if task >= suite.num_tasks() {
        return Err(Error::DimensionMismatch(format!(
            "task {task} out of range for {} tasks",
            suite.num_tasks()
        )));
    }
    Ok(())
}

fn check_params(suite: &(impl TaskSuite + ?Sized), theta: &DVector<f64>) -> Result<()> {
    if theta.len() != suite.param_dim() {
        return Err(Error::DimensionMismatch(format!(
            "parameter vector has length {}, expected {}",
            theta.len(),
            suite.param_dim()
        )));
    }
    Ok(())
}

/// `∇_θ Σ α_i ℓ_i(θ)`.
pub fn weighted_grad<S: TaskSuite + ?Sized>(
    suite: &S,
    alpha: &DVector<f64>,
    theta: &DVector<f64>,
    batch: &Batch,
) -> Result<DVector<f64>> {
    if alpha.len() != suite.num_tasks() {
        return Err(Error::DimensionMismatch(format!(
            "{} task weights for {} tasks",
            alpha.len(),
            suite.num_tasks()
        )));
    }
    let mut total = DVector::zeros(suite.param_dim());
    for (i, &a) in alpha.iter().enumerate() {
        if a != 0.0 {
            total.axpy(a, &suite.grad(i, theta, batch)?, 1.0);
        }
    }
    Ok(total)
}

/// Central-difference HVP of the weighted objective along `v`, with step
/// `h = ε^{1/3}(1 + ‖θ‖)` on the unit vector `v/‖v‖`.
pub fn finite_difference_hvp<S: TaskSuite + ?Sized>(
    suite: &S,
    alpha: &DVector<f64>,
    theta: &DVector<f64>,
    v: &DVector<f64>,
    batch: &Batch,
) -> Result<DVector<f64>> {
    check_params(suite, theta)?;
    if v.len() != theta.len() {
        return Err(Error::DimensionMismatch(format!(
            "direction has length {}, expected {}",
            v.len(),
            theta.len()
        )));
    }
    let norm = v.norm();
    if norm == 0.0 {
        return Ok(DVector::zeros(theta.len()));
    }
    let unit = v / norm;
    let h = f64::EPSILON.cbrt() * (1.0 + theta.norm());
    let plus = weighted_grad(suite, alpha, &(theta + h * &unit), batch)?;
    let minus = weighted_grad(suite, alpha, &(theta - h * &unit), batch)?;
    Ok((plus - minus) * (norm / (2.0 * h)))
}

/// Evaluates every task gradient at `θ` and stacks them into a gradient set.
pub fn task_gradients<S: TaskSuite + ?Sized>(
    suite: &S,
    theta: &DVector<f64>,
    batch: &Batch,
) -> Result<TaskGradientSet> {
    let grads: Vec<Vec<f64>> = (0..suite.num_tasks())
        .map(|i| suite.grad(i, theta, batch).map(|g| g.as_slice().to_vec()))
        .collect::<Result<_>>()?;
    TaskGradientSet::new(&grads)
}

/// Per-task losses at `θ`.
pub fn task_losses<S: TaskSuite + ?Sized>(
    suite: &S,
    theta: &DVector<f64>,
    batch: &Batch,
) -> Result<Vec<f64>> {
    (0..suite.num_tasks())
        .map(|i| suite.loss(i, theta, batch))
        .collect()
}

/// Largest relative error between `suite.grad` and central differences of
/// `suite.loss` over all tasks, using step `h` per coordinate.
pub fn gradient_check<S: TaskSuite + ?Sized>(
    suite: &S,
    theta: &DVector<f64>,
    batch: &Batch,
    h: f64,
) -> Result<f64> {
    let mut worst = 0.0_f64;
    for task in 0..suite.num_tasks() {
        let analytic = suite.grad(task, theta, batch)?;
        let mut numeric = DVector::zeros(theta.len());
        let mut probe = theta.clone();
        for j in 0..theta.len() {
            let orig = probe[j];
            probe[j] = orig + h;
            let up = suite.loss(task, &probe, batch)?;
            probe[j] = orig - h;
            let down = suite.loss(task, &probe, batch)?;
            probe[j] = orig;
            numeric[j] = (up - down) / (2.0 * h);
        }
        let scale = analytic.norm().max(numeric.norm()).max(1e-12);
        worst = worst.max((analytic - numeric).norm() / scale);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_resolution() {
        assert_eq!(Batch::Full.indices(3).unwrap(), vec![0, 1, 2]);
        assert_eq!(Batch::Range(1..3).indices(3).unwrap(), vec![1, 2]);
        assert!(Batch::Indices(vec![0, 3]).indices(3).is_err());
        assert!(Batch::Range(2..2).indices(3).is_err());
    }
}
