//! Step-size rule, Pareto-stationarity measures and the Δ% metric.

use serde::{Deserialize, Serialize};

use crate::bargaining::{BargainingWeights, PreferenceVector, TaskGradientSet};
use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance of the min-norm simplex problem behind [`pareto_stationarity`].
pub const MIN_NORM_TOLERANCE: f64 = 1e-10;

/// `μ = (1/(K·L)) Σ p_i/α_i`, the step size that makes the averaged loss
/// decrease monotonically on `L`-smooth tasks.
pub fn theorem1_step_size(
    prefs: &PreferenceVector,
    weights: &BargainingWeights,
    smoothness: f64,
) -> Result<f64> {
    if !(smoothness.is_finite() && smoothness > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "smoothness constant must be > 0, got {smoothness}"
        )));
    }
    if prefs.len() != weights.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} preferences and {} weights",
            prefs.len(),
            weights.len()
        )));
    }
    let alpha = &weights.alpha;
    if let Some((index, &value)) = alpha
        .iter()
        .enumerate()
        .find(|(_, a)| a.is_nan() || **a <= 0.0)
    {
        return Err(Error::NonPositiveWeight { index, value });
    }
    let k = alpha.len() as f64;
    let total: f64 = prefs
        .probs()
        .iter()
        .zip(alpha.iter())
        .map(|(p, a)| p / a)
        .sum();
    Ok(total / (k * smoothness))
}

/// Smallest singular value of `G` and the minimum of `‖Gw‖` over the
/// probability simplex. The second is zero exactly at Pareto-stationary
/// points. The norm is taken of `Gw` itself, since `√(wᵀGᵀGw)` cannot
/// resolve values below about `√ε·‖G‖`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoStationarity {
    pub sigma_min: f64,
    pub min_norm_combo: f64,
}

pub fn pareto_stationarity(grads: &TaskGradientSet) -> ParetoStationarity {
    ParetoStationarity {
        sigma_min: linalg::smallest_singular_value(grads.gradients()),
        min_norm_combo: (grads.gradients()
            * linalg::min_norm_simplex(grads.gram(), MIN_NORM_TOLERANCE).weights)
            .norm(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricDirection {
    LowerIsBetter,
    HigherIsBetter,
}

impl MetricDirection {
    /// `δ_k`: 0 when lower is better, 1 otherwise.
    pub fn delta(self) -> u8 {
        match self {
            MetricDirection::LowerIsBetter => 0,
            MetricDirection::HigherIsBetter => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaPercentReport {
    pub method: Vec<f64>,
    pub baseline: Vec<f64>,
    pub directions: Vec<MetricDirection>,
    /// Signed relative change per task, as a fraction.
    pub per_task: Vec<f64>,
    /// Mean of `per_task`, as a fraction (multiply by 100 for percent).
    pub delta: f64,
}

impl DeltaPercentReport {
    pub fn percent(&self) -> f64 {
        100.0 * self.delta
    }
}

/// `Δ = (1/K) Σ (−1)^{δ_k} (M_m,k − M_b,k)/M_b,k`. Positive values mean the
/// method is worse than the baseline.
pub fn delta_percent(
    method: &[f64],
    baseline: &[f64],
    directions: &[MetricDirection],
) -> Result<DeltaPercentReport> {
    if method.len() != baseline.len() || method.len() != directions.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} method metrics, {} baseline metrics, {} directions",
            method.len(),
            baseline.len(),
            directions.len()
        )));
    }
    if method.is_empty() {
        return Err(Error::Empty("metric list"));
    }
    if let Some(k) = baseline.iter().position(|&b| b == 0.0) {
        return Err(Error::InvalidConfig(format!("baseline metric {k} is zero")));
    }
    let per_task: Vec<f64> = method
        .iter()
        .zip(baseline)
        .zip(directions)
        .map(|((&m, &b), dir)| {
            let rel = (m - b) / b;
            if dir.delta() == 0 {
                rel
            } else {
                -rel
            }
        })
        .collect();
    let delta = per_task.iter().sum::<f64>() / per_task.len() as f64;
    Ok(DeltaPercentReport {
        method: method.to_vec(),
        baseline: baseline.to_vec(),
        directions: directions.to_vec(),
        per_task,
        delta,
    })
}
