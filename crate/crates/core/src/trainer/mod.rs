//! The alternating training loop: bargaining updates of the shared
//! parameters, with a hypergradient step on the preference vector every
//! `N_p` inner steps.

mod metrics;
mod trajectory;

use nalgebra::DVector;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bargaining::{
    solve_alpha, update_direction_unchecked, BargainingWeights, PreferenceVector, SolverConfig,
    TaskGradientSet,
};
use crate::diffmodels::{task_gradients, task_losses, Batch, TaskSuite};
use crate::error::{Error, Result};
use crate::hypergrad::{hypergradient, IhvpConfig};
use crate::linalg;

pub use metrics::{
    delta_percent, pareto_stationarity, theorem1_step_size, DeltaPercentReport, MetricDirection,
    ParetoStationarity, MIN_NORM_TOLERANCE,
};
pub use trajectory::{StepRecord, Termination, Trajectory};

/// Lower bound on each coordinate in projected preference updates.
pub const PROJECTED_PREF_FLOOR: f64 = 1e-3;
/// Power iterations per task when estimating the smoothness constant.
pub const SMOOTHNESS_PROBES: usize = 50;
/// Safety factor applied to the estimated smoothness constant.
pub const SMOOTHNESS_SAFETY: f64 = 1.1;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerOptimizer {
    PlainSgd,
    /// Adam with `β₁ = 0.9`, `β₂ = 0.999`, `ε = 1e-8`.
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefUpdateRule {
    /// Gradient step on the logits, `p = softmax(z)`.
    SoftmaxLogits,
    /// Gradient step on `p`, then projection onto the simplex with every
    /// coordinate at least [`PROJECTED_PREF_FLOOR`].
    ProjectedEuclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValSource {
    /// Validation gradient from a fresh batch of the training data.
    SeparateTrainBatch,
    /// A fraction of the data is held out for validation and never trained
    /// on.
    HeldoutSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    /// `θ ← θ − η·Gα` (through the inner optimizer).
    FixedLr,
    /// `θ ← θ − μ·Gα` with `μ = (1/(K·L)) Σ p_i/α_i`.
    Theorem1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub inner_lr: f64,
    pub pref_lr: f64,
    pub pref_momentum: f64,
    pub pref_update_period: usize,
    pub outer_iters: usize,
    pub inner_optimizer: InnerOptimizer,
    pub pref_update_rule: PrefUpdateRule,
    pub val_source: ValSource,
    /// Fraction of samples held out in `heldout_set` mode.
    pub heldout_fraction: f64,
    /// Task whose loss is the validation objective.
    pub main_task: usize,
    pub step_mode: StepMode,
    /// Smoothness constant for `theorem1`; falls back to the suite's bound,
    /// then to an HVP estimate.
    pub smoothness: Option<f64>,
    /// Minibatch size; `None` trains full-batch.
    pub batch_size: Option<usize>,
    /// Training halts once the min-norm combination drops below this.
    pub stationarity_threshold: f64,
    /// What a minibatch step does when its gradients are Pareto stationary
    /// or its bargaining game has no solution.
    pub stationary_batch: StationaryBatchPolicy,
    pub ihvp: IhvpConfig,
    pub solver: SolverConfig,
    pub seed: u64,
}

/// Handling of minibatches without a bargaining solution. Full-batch steps
/// always halt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StationaryBatchPolicy {
    /// End the run as Pareto stationary.
    Halt,
    /// Leave the parameters unchanged for this step.
    Skip,
    /// Step along the preference-weighted gradient `Gp`.
    Scalarize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            inner_lr: 1e-2,
            pref_lr: 5e-3,
            pref_momentum: 0.9,
            pref_update_period: 25,
            outer_iters: 100,
            inner_optimizer: InnerOptimizer::Adam,
            pref_update_rule: PrefUpdateRule::SoftmaxLogits,
            val_source: ValSource::SeparateTrainBatch,
            heldout_fraction: 0.1,
            main_task: 0,
            step_mode: StepMode::FixedLr,
            smoothness: None,
            batch_size: None,
            stationarity_threshold: 1e-10,
            stationary_batch: StationaryBatchPolicy::Halt,
            ihvp: IhvpConfig::default(),
            solver: SolverConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} must be > 0, got {v}")))
            }
        };
        positive("inner_lr", self.inner_lr)?;
        if !(self.pref_lr.is_finite() && self.pref_lr >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "pref_lr must be >= 0, got {}",
                self.pref_lr
            )));
        }
        if !(0.0..1.0).contains(&self.pref_momentum) {
            return Err(Error::InvalidConfig(format!(
                "pref_momentum must lie in [0, 1), got {}",
                self.pref_momentum
            )));
        }
        if self.pref_update_period == 0 {
            return Err(Error::InvalidConfig(
                "pref_update_period must be >= 1".into(),
            ));
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "heldout_fraction must lie in (0, 1), got {}",
                self.heldout_fraction
            )));
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.stationarity_threshold.is_nan() || self.stationarity_threshold < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "stationarity_threshold must be >= 0, got {}",
                self.stationarity_threshold
            )));
        }
        if self.step_mode == StepMode::Theorem1 {
            if self.inner_optimizer != InnerOptimizer::PlainSgd {
                return Err(Error::InvalidConfig(
                    "theorem1 step mode requires inner_optimizer = plain_sgd".into(),
                ));
            }
            if let Some(l) = self.smoothness {
                positive("smoothness", l)?;
            }
        }
        self.ihvp.validate()?;
        self.solver.validate()
    }

    pub fn total_steps(&self) -> usize {
        self.outer_iters * self.pref_update_period
    }
}

struct Adam {
    m: DVector<f64>,
    v: DVector<f64>,
    t: i32,
}

impl Adam {
    fn new(d: usize) -> Self {
        Self {
            m: DVector::zeros(d),
            v: DVector::zeros(d),
            t: 0,
        }
    }

    fn step(&mut self, grad: &DVector<f64>, lr: f64) -> DVector<f64> {
        self.t += 1;
        self.m = ADAM_BETA1 * &self.m + (1.0 - ADAM_BETA1) * grad;
        self.v = ADAM_BETA2 * &self.v + (1.0 - ADAM_BETA2) * grad.map(|g| g * g);
        let mc = 1.0 - ADAM_BETA1.powi(self.t);
        let vc = 1.0 - ADAM_BETA2.powi(self.t);
        DVector::from_fn(grad.len(), |i, _| {
            lr * (self.m[i] / mc) / ((self.v[i] / vc).sqrt() + ADAM_EPS)
        })
    }
}

/// Applies the configured inner optimizer to a descent direction.
struct InnerStepper {
    adam: Option<Adam>,
}

impl InnerStepper {
    fn new(optimizer: InnerOptimizer, d: usize) -> Self {
        Self {
            adam: (optimizer == InnerOptimizer::Adam).then(|| Adam::new(d)),
        }
    }

    /// The displacement to subtract from `θ`.
    fn displacement(&mut self, direction: &DVector<f64>, lr: f64) -> DVector<f64> {
        match &mut self.adam {
            Some(adam) => adam.step(direction, lr),
            None => direction * lr,
        }
    }
}

/// Train/validation sample split and epoch-wise minibatch sampling.
struct DataPlan {
    train: Vec<usize>,
    val: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    batch_size: Option<usize>,
    rng: ChaCha8Rng,
    aux_rng: ChaCha8Rng,
    data_free: bool,
}

impl DataPlan {
    fn new(n: usize, cfg: &TrainConfig) -> Result<Self> {
        let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        split_rng.set_stream(1);
        let data_free = n < 2;
        let (train, val) = if data_free {
            (vec![0], vec![0])
        } else {
            let all: Vec<usize> = (0..n).collect();
            match cfg.val_source {
                ValSource::SeparateTrainBatch => (all.clone(), all),
                ValSource::HeldoutSet => {
                    let mut shuffled = all;
                    shuffled.shuffle(&mut split_rng);
                    let held = ((n as f64) * cfg.heldout_fraction).round() as usize;
                    let held = held.clamp(1, n - 1);
                    let val = shuffled.split_off(n - held);
                    (shuffled, val)
                }
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(2);
        let mut aux_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        aux_rng.set_stream(3);
        Ok(Self {
            order: train.clone(),
            cursor: usize::MAX,
            train,
            val,
            batch_size: cfg.batch_size,
            rng,
            aux_rng,
            data_free,
        })
    }

    fn full(rows: &[usize], n: usize) -> Batch {
        if rows.len() == n {
            Batch::Full
        } else {
            Batch::Indices(rows.to_vec())
        }
    }

    fn train_full(&self, n: usize) -> Batch {
        if self.data_free {
            Batch::Full
        } else {
            Self::full(&self.train, n)
        }
    }

    fn val_full(&self, n: usize) -> Batch {
        if self.data_free {
            Batch::Full
        } else {
            Self::full(&self.val, n)
        }
    }

    /// Next inner minibatch, reshuffling the training rows every epoch.
    fn next_train(&mut self, n: usize) -> Batch {
        let size = match self.batch_size {
            Some(b) if !self.data_free && b < self.train.len() => b,
            _ => return self.train_full(n),
        };
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + size).min(self.order.len());
        let batch = Batch::Indices(self.order[self.cursor..end].to_vec());
        self.cursor = end;
        batch
    }

    fn sample(rows: &[usize], size: Option<usize>, rng: &mut ChaCha8Rng) -> Option<Batch> {
        match size {
            Some(b) if b < rows.len() => Some(Batch::Indices(
                rows.choose_multiple(rng, b).copied().collect(),
            )),
            _ => None,
        }
    }

    /// Batch for the Hessian and mixed partial of a preference update.
    fn hyper_train(&mut self, n: usize) -> Batch {
        if self.data_free {
            return Batch::Full;
        }
        Self::sample(&self.train, self.batch_size, &mut self.aux_rng)
            .unwrap_or_else(|| self.train_full(n))
    }

    /// Batch for the validation gradient of a preference update.
    fn hyper_val(&mut self, n: usize) -> Batch {
        if self.data_free {
            return Batch::Full;
        }
        Self::sample(&self.val, self.batch_size, &mut self.aux_rng)
            .unwrap_or_else(|| self.val_full(n))
    }
}

/// Estimates a common smoothness constant as the safety factor times the
/// largest per-task Hessian spectral radius, found by power iteration.
pub fn estimate_smoothness<S: TaskSuite + ?Sized>(
    suite: &S,
    theta: &DVector<f64>,
    batch: &Batch,
    seed: u64,
) -> Result<f64> {
    let k = suite.num_tasks();
    let d = suite.param_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = 0.0_f64;
    for i in 0..k {
        let mut e = DVector::zeros(k);
        e[i] = 1.0;
        let mut v: DVector<f64> = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        v /= v.norm();
        let mut radius = 0.0_f64;
        for _ in 0..SMOOTHNESS_PROBES {
            let hv = suite.hvp(&e, theta, &v, batch)?;
            let norm = hv.norm();
            if norm.is_nan() || norm <= 0.0 {
                break;
            }
            radius = radius.max(norm);
            v = hv / norm;
        }
        best = best.max(radius);
    }
    if !(best.is_finite() && best > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "smoothness estimate {best} is not positive"
        )));
    }
    Ok(SMOOTHNESS_SAFETY * best)
}

/// Runs the alternating training loop for `cfg.outer_iters` outer iterations
/// of `cfg.pref_update_period` inner steps each.
pub fn train<S: TaskSuite + ?Sized>(
    suite: &S,
    cfg: &TrainConfig,
    init_theta: &DVector<f64>,
    init_prefs: &PreferenceVector,
) -> Result<Trajectory> {
    cfg.validate()?;
    let k = suite.num_tasks();
    let d = suite.param_dim();
    let n = suite.num_samples();
    if init_theta.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "initial parameters have length {}, expected {d}",
            init_theta.len()
        )));
    }
    if init_prefs.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "{} preferences for {k} tasks",
            init_prefs.len()
        )));
    }
    if cfg.main_task >= k {
        return Err(Error::InvalidConfig(format!(
            "main_task {} out of range for {k} tasks",
            cfg.main_task
        )));
    }

    let mut plan = DataPlan::new(n, cfg)?;
    let train_eval = plan.train_full(n);
    let val_eval = plan.val_full(n);
    let smoothness = match cfg.step_mode {
        StepMode::FixedLr => None,
        StepMode::Theorem1 => Some(match cfg.smoothness.or(suite.smoothness_bound()) {
            Some(l) => l,
            None => estimate_smoothness(suite, init_theta, &train_eval, cfg.seed)?,
        }),
    };

    let mut theta = init_theta.clone();
    let mut prefs = init_prefs.clone();
    let mut velocity = DVector::zeros(k);
    let mut stepper = InnerStepper::new(cfg.inner_optimizer, d);
    let mut traj = Trajectory {
        num_tasks: k,
        records: Vec::with_capacity(cfg.total_steps()),
        params: vec![theta.as_slice().to_vec()],
        directions: Vec::with_capacity(cfg.total_steps()),
        termination: Termination::Completed,
        smoothness,
        pref_updates: 0,
        skipped_pref_updates: 0,
        skipped_steps: 0,
        fallback_steps: 0,
    };

    'outer: for outer in 0..cfg.outer_iters {
        for inner in 0..cfg.pref_update_period {
            let step = outer * cfg.pref_update_period + inner;
            let losses = task_losses(suite, &theta, &train_eval)?;
            let val_loss = suite.loss(cfg.main_task, &theta, &val_eval)?;
            if !losses.iter().all(|l| l.is_finite()) || !val_loss.is_finite() {
                traj.termination = Termination::Diverged {
                    step,
                    reason: "non-finite loss".into(),
                };
                break 'outer;
            }
            let batch = plan.next_train(n);
            let grads = task_gradients(suite, &theta, &batch)?;
            let stat = pareto_stationarity(&grads);
            let mut record = StepRecord {
                step,
                losses,
                probs: prefs.probs().as_slice().to_vec(),
                alpha: vec![f64::NAN; k],
                residual: f64::NAN,
                mu: 0.0,
                sigma_min: stat.sigma_min,
                min_norm_combo: stat.min_norm_combo,
                val_loss,
            };
            let minibatch = !matches!(batch, Batch::Full) && batch != train_eval;
            let policy = if minibatch {
                cfg.stationary_batch
            } else {
                StationaryBatchPolicy::Halt
            };
            let solved = if stat.min_norm_combo < cfg.stationarity_threshold {
                Err(Error::ParetoStationary)
            } else {
                solve_alpha(&grads, &prefs, &cfg.solver)
            };
            let weights = match solved {
                Ok(w) => w,
                Err(e) if policy != StationaryBatchPolicy::Halt && e.is_numerical() => {
                    log::debug!("step {step}: minibatch without bargaining solution: {e}");
                    if policy == StationaryBatchPolicy::Skip {
                        skip_step(&mut traj, record, &theta);
                        continue;
                    }
                    traj.fallback_steps += 1;
                    BargainingWeights {
                        alpha: prefs.probs().clone(),
                        residual_inf: f64::NAN,
                        iterations_used: 0,
                        converged: false,
                        regularization: 0.0,
                    }
                }
                Err(e) if step == 0 => return Err(e),
                Err(Error::ParetoStationary) => {
                    traj.records.push(record);
                    traj.termination = Termination::ParetoStationary { step };
                    break 'outer;
                }
                Err(e) if e.is_numerical() => {
                    traj.records.push(record);
                    traj.termination = Termination::SolverFailed {
                        step,
                        reason: e.to_string(),
                    };
                    break 'outer;
                }
                Err(e) => return Err(e),
            };
            if !weights.converged {
                log::debug!(
                    "step {step}: bargaining solve stopped at residual {:.3e}",
                    weights.residual_inf
                );
            }
            let direction = update_direction_unchecked(&grads, &weights)?;
            let (mu, displacement) = match cfg.step_mode {
                StepMode::FixedLr => (cfg.inner_lr, stepper.displacement(&direction, cfg.inner_lr)),
                StepMode::Theorem1 => {
                    let l = smoothness.expect("smoothness resolved for theorem1 mode");
                    let mu = theorem1_step_size(&prefs, &weights, l)?;
                    (mu, &direction * mu)
                }
            };
            if !displacement.iter().all(|x| x.is_finite()) {
                traj.records.push(record);
                traj.termination = Termination::Diverged {
                    step,
                    reason: "non-finite update".into(),
                };
                break 'outer;
            }
            theta -= displacement;
            record.alpha = weights.alpha.as_slice().to_vec();
            record.residual = weights.residual_inf;
            record.mu = mu;
            traj.records.push(record);
            traj.params.push(theta.as_slice().to_vec());
            traj.directions.push(direction.as_slice().to_vec());
        }

        if cfg.pref_lr > 0.0 {
            match preference_gradient(suite, cfg, &mut plan, &theta, &prefs)? {
                Some(grad) => {
                    velocity = cfg.pref_momentum * &velocity + grad;
                    prefs = step_preferences(&prefs, &velocity, cfg)?;
                    traj.pref_updates += 1;
                }
                None => traj.skipped_pref_updates += 1,
            }
        }
    }
    if traj.params.len() == traj.records.len() {
        traj.params.push(theta.as_slice().to_vec());
    }
    Ok(traj)
}

/// Records a step that leaves the parameters unchanged.
fn skip_step(traj: &mut Trajectory, record: StepRecord, theta: &DVector<f64>) {
    traj.records.push(record);
    traj.params.push(theta.as_slice().to_vec());
    traj.directions.push(vec![0.0; theta.len()]);
    traj.skipped_steps += 1;
}

/// The hypergradient in the coordinates updated by the preference rule, or
/// `None` when the bargaining solve at the current point did not converge.
fn preference_gradient<S: TaskSuite + ?Sized>(
    suite: &S,
    cfg: &TrainConfig,
    plan: &mut DataPlan,
    theta: &DVector<f64>,
    prefs: &PreferenceVector,
) -> Result<Option<DVector<f64>>> {
    let n = suite.num_samples();
    let train_batch = plan.hyper_train(n);
    let val_batch = plan.hyper_val(n);
    let grads = task_gradients(suite, theta, &train_batch)?;
    let weights = match solve_alpha(&grads, prefs, &cfg.solver) {
        Ok(w) if w.converged => w,
        Ok(w) => {
            log::warn!(
                "skipping preference update: solve residual {:.3e}",
                w.residual_inf
            );
            return Ok(None);
        }
        Err(e) if e.is_numerical() => {
            log::warn!("skipping preference update: {e}");
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    let val_grad = suite.grad(cfg.main_task, theta, &val_batch)?;
    let hg = hypergradient(
        suite,
        theta,
        &train_batch,
        &grads,
        prefs,
        &weights,
        &val_grad,
        &cfg.ihvp,
    )?;
    Ok(Some(match cfg.pref_update_rule {
        PrefUpdateRule::SoftmaxLogits => hg.grad_logits,
        PrefUpdateRule::ProjectedEuclidean => hg.grad_p,
    }))
}

fn step_preferences(
    prefs: &PreferenceVector,
    velocity: &DVector<f64>,
    cfg: &TrainConfig,
) -> Result<PreferenceVector> {
    match cfg.pref_update_rule {
        PrefUpdateRule::SoftmaxLogits => {
            let z = prefs.logits() - cfg.pref_lr * velocity;
            PreferenceVector::from_logits(z.as_slice())
        }
        PrefUpdateRule::ProjectedEuclidean => {
            let raw = prefs.probs() - cfg.pref_lr * velocity;
            let p = linalg::project_simplex_with_floor(&raw, PROJECTED_PREF_FLOOR)?;
            PreferenceVector::from_probs((&p / p.sum()).as_slice())
        }
    }
}

/// Result of training on a single task's raw gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleTaskRun {
    pub params: Vec<f64>,
    /// Parameters before each step, followed by the final parameters.
    pub path: Vec<Vec<f64>>,
    /// Training loss of the task before each step.
    pub losses: Vec<f64>,
}

/// Trains on one task alone with the same optimizer, batches and budget as
/// [`train`] would use.
pub fn train_single_task<S: TaskSuite + ?Sized>(
    suite: &S,
    task: usize,
    cfg: &TrainConfig,
    init_theta: &DVector<f64>,
) -> Result<SingleTaskRun> {
    cfg.validate()?;
    if task >= suite.num_tasks() {
        return Err(Error::InvalidConfig(format!(
            "task {task} out of range for {} tasks",
            suite.num_tasks()
        )));
    }
    if init_theta.len() != suite.param_dim() {
        return Err(Error::DimensionMismatch(format!(
            "initial parameters have length {}, expected {}",
            init_theta.len(),
            suite.param_dim()
        )));
    }
    let n = suite.num_samples();
    let mut plan = DataPlan::new(n, cfg)?;
    let train_eval = plan.train_full(n);
    let mut stepper = InnerStepper::new(cfg.inner_optimizer, suite.param_dim());
    let mut theta = init_theta.clone();
    let mut losses = Vec::with_capacity(cfg.total_steps());
    let mut path = Vec::with_capacity(cfg.total_steps() + 1);
    for _ in 0..cfg.total_steps() {
        path.push(theta.as_slice().to_vec());
        let loss = suite.loss(task, &theta, &train_eval)?;
        if !loss.is_finite() {
            return Err(Error::Diverged("single-task loss is non-finite".into()));
        }
        losses.push(loss);
        let batch = plan.next_train(n);
        let g = suite.grad(task, &theta, &batch)?;
        theta -= stepper.displacement(&g, cfg.inner_lr);
    }
    path.push(theta.as_slice().to_vec());
    Ok(SingleTaskRun {
        params: theta.as_slice().to_vec(),
        path,
        losses,
    })
}

/// Runs the symmetric game `GᵀGα = 1/α` at each point of a recorded
/// trajectory and returns its update directions, for comparison against
/// uniform-preference runs.
pub fn nash_mtl_directions<S: TaskSuite + ?Sized>(
    suite: &S,
    traj: &Trajectory,
    cfg: &SolverConfig,
) -> Result<Vec<DVector<f64>>> {
    traj.params
        .iter()
        .take(traj.directions.len())
        .map(|theta| {
            let theta = DVector::from_column_slice(theta);
            let grads: TaskGradientSet = task_gradients(suite, &theta, &Batch::Full)?;
            let w: BargainingWeights = crate::bargaining::solve_nash_mtl(&grads, cfg)?;
            update_direction_unchecked(&grads, &w)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmodels::{make_quadratic, random_quadratic_spec, QuadraticSuiteSpec};
    use nalgebra::DMatrix;

    fn sgd(outer: usize) -> TrainConfig {
        TrainConfig {
            inner_optimizer: InnerOptimizer::PlainSgd,
            pref_lr: 0.0,
            outer_iters: outer,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            step_mode: StepMode::Theorem1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            pref_update_period: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let json = r#"{"inner_lr": 0.1, "bogus": 1}"#;
        assert!(serde_json::from_str::<TrainConfig>(json).is_err());
    }

    #[test]
    fn single_task_descends_with_unit_directions() {
        let suite = make_quadratic(QuadraticSuiteSpec {
            matrices: vec![DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0]))],
            centers: vec![DVector::zeros(2)],
        })
        .unwrap();
        let init = DVector::from_vec(vec![2.0, -1.5]);
        let prefs = PreferenceVector::uniform(1).unwrap();
        let traj = train(&suite, &sgd(4), &init, &prefs).unwrap();
        assert_eq!(traj.records.len(), 100);
        for (r, dir) in traj.records.iter().zip(&traj.directions) {
            let norm = DVector::from_column_slice(dir).norm();
            assert!((norm - 1.0).abs() < 1e-6);
            assert!(r.probs == vec![1.0]);
        }
        // unit-norm steps of size 0.01 descend until they overshoot the optimum
        let losses: Vec<f64> = traj.records.iter().map(|r| r.losses[0]).collect();
        for w in losses.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let suite = make_quadratic(random_quadratic_spec(3, 4, (0.5, 2.0), 1)).unwrap();
        let cfg = TrainConfig {
            outer_iters: 3,
            pref_update_period: 5,
            ..TrainConfig::default()
        };
        let init = DVector::from_element(4, 3.0);
        let prefs = PreferenceVector::uniform(3).unwrap();
        let a = train(&suite, &cfg, &init, &prefs).unwrap();
        let b = train(&suite, &cfg, &init, &prefs).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pref_updates, 3);
        for r in &a.records {
            assert!((r.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(r.probs.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn halts_at_stationary_points() {
        let suite = make_quadratic(QuadraticSuiteSpec {
            matrices: vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2)],
            centers: vec![
                DVector::from_vec(vec![-1.0, 0.0]),
                DVector::from_vec(vec![1.0, 0.0]),
            ],
        })
        .unwrap();
        let prefs = PreferenceVector::uniform(2).unwrap();
        // the midpoint lies on the front: g_1 = −g_2
        let err = train(&suite, &sgd(1), &DVector::zeros(2), &prefs);
        assert!(matches!(err, Err(Error::ParetoStationary)));
    }

    #[test]
    fn projected_updates_keep_the_floor() {
        let suite = make_quadratic(random_quadratic_spec(3, 3, (0.5, 2.0), 7)).unwrap();
        let cfg = TrainConfig {
            outer_iters: 10,
            pref_update_period: 2,
            pref_lr: 5.0,
            pref_update_rule: PrefUpdateRule::ProjectedEuclidean,
            ..TrainConfig::default()
        };
        let traj = train(
            &suite,
            &cfg,
            &DVector::from_element(3, 2.0),
            &PreferenceVector::uniform(3).unwrap(),
        )
        .unwrap();
        for r in &traj.records {
            assert!(r.probs.iter().all(|&p| p >= PROJECTED_PREF_FLOOR - 1e-12));
            assert!((r.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothness_estimate_brackets_the_curvature() {
        let suite = make_quadratic(random_quadratic_spec(2, 5, (0.5, 3.0), 2)).unwrap();
        let theta = DVector::zeros(5);
        let est = estimate_smoothness(&suite, &theta, &Batch::Full, 0).unwrap();
        let exact = suite.smoothness_bound().unwrap();
        assert!(est > 0.5 && est <= SMOOTHNESS_SAFETY * exact + 1e-12);
    }
}
