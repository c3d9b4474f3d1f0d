//! One-hidden-layer tanh network with a shared trunk and one scalar
//! regression head per task.
//!
//! Parameter layout: `W₁` (hidden×inputs, row-major), `b₁` (hidden), head
//! weights `V` (tasks×hidden, row-major), head biases `c` (tasks).

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{check_params, check_task, Batch, TaskSuite};
use crate::error::{Error, Result};

const INPUTS: usize = 3;
const SAMPLES: usize = 64;
const TARGET_NOISE: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct ToyMlpSuite {
    hidden: usize,
    inputs: DMatrix<f64>,
    /// n×K.
    targets: DMatrix<f64>,
}

/// A toy network on 64 Gaussian inputs in R³. Task `k` regresses
/// `tanh(u_kᵀx)` plus small noise for an independent random teacher `u_k`.
pub fn make_toy_mlp(hidden: usize, tasks: usize, seed: u64) -> Result<ToyMlpSuite> {
    if hidden == 0 {
        return Err(Error::InvalidConfig("toy MLP needs hidden >= 1".into()));
    }
    if tasks < 2 {
        return Err(Error::InvalidConfig(format!(
            "toy MLP needs at least 2 tasks, got {tasks}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: DMatrix<f64> =
        DMatrix::from_fn(SAMPLES, INPUTS, |_, _| StandardNormal.sample(&mut rng));
    let teachers: DMatrix<f64> =
        DMatrix::from_fn(INPUTS, tasks, |_, _| StandardNormal.sample(&mut rng));
    let noise = Normal::new(0.0, TARGET_NOISE).expect("valid noise scale");
    let clean = (&inputs * teachers).map(f64::tanh);
    let targets = clean.map(|y| y + noise.sample(&mut rng));
    ToyMlpSuite::with_data(hidden, inputs, targets)
}

impl ToyMlpSuite {
    /// Builds the network over explicit data: `inputs` is n×m and `targets`
    /// is n×K.
    pub fn with_data(hidden: usize, inputs: DMatrix<f64>, targets: DMatrix<f64>) -> Result<Self> {
        if hidden == 0 || inputs.nrows() == 0 || inputs.ncols() == 0 || targets.ncols() == 0 {
            return Err(Error::Empty("toy MLP data"));
        }
        if inputs.nrows() != targets.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} input rows and {} target rows",
                inputs.nrows(),
                targets.nrows()
            )));
        }
        if !inputs.iter().chain(targets.iter()).all(|x| x.is_finite()) {
            return Err(Error::NonFinite("toy MLP data"));
        }
        Ok(Self {
            hidden,
            inputs,
            targets,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let w1 = self.hidden * self.input_dim();
        let b1 = w1 + self.hidden;
        let v = b1 + self.num_tasks() * self.hidden;
        (w1, b1, v)
    }

    /// Gaussian initialisation scaled by `1/√fan_in`.
    pub fn init_params(&self, seed: u64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w1_end, b1_end, v_end) = self.offsets();
        let trunk_scale = 1.0 / (self.input_dim() as f64).sqrt();
        let head_scale = 1.0 / (self.hidden as f64).sqrt();
        DVector::from_fn(self.param_dim(), |i, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            match i {
                i if i < w1_end => z * trunk_scale,
                i if i < b1_end => 0.0,
                i if i < v_end => z * head_scale,
                _ => 0.0,
            }
        })
    }

    /// Hidden activations for one sample.
    fn hidden_activations(&self, theta: &DVector<f64>, row: usize) -> DVector<f64> {
        let m = self.input_dim();
        let (w1_end, _, _) = self.offsets();
        DVector::from_fn(self.hidden, |j, _| {
            let mut z = theta[w1_end + j];
            for c in 0..m {
                z += theta[j * m + c] * self.inputs[(row, c)];
            }
            z.tanh()
        })
    }

    fn head_output(&self, theta: &DVector<f64>, task: usize, a: &DVector<f64>) -> f64 {
        let (_, b1_end, v_end) = self.offsets();
        let v = theta.rows(b1_end + task * self.hidden, self.hidden);
        v.dot(a) + theta[v_end + task]
    }
}

impl TaskSuite for ToyMlpSuite {
    fn num_tasks(&self) -> usize {
        self.targets.ncols()
    }

    fn param_dim(&self) -> usize {
        self.hidden * (self.input_dim() + 1) + self.num_tasks() * (self.hidden + 1)
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
                let a = self.hidden_activations(theta, r);
                let e = self.head_output(theta, task, &a) - self.targets[(r, task)];
                e * e
            })
            .sum();
        Ok(total / rows.len() as f64)
    }

    fn grad(&self, task: usize, theta: &DVector<f64>, batch: &Batch) -> Result<DVector<f64>> {
        check_task(self, task)?;
        check_params(self, theta)?;
        let rows = batch.indices(self.num_samples())?;
        let m = self.input_dim();
        let h = self.hidden;
        let (w1_end, b1_end, v_end) = self.offsets();
        let head = b1_end + task * h;
        let mut g = DVector::zeros(theta.len());
        for &r in &rows {
            let a = self.hidden_activations(theta, r);
            let resid = self.head_output(theta, task, &a) - self.targets[(r, task)];
            for j in 0..h {
                g[head + j] += resid * a[j];
                let dz = resid * theta[head + j] * (1.0 - a[j] * a[j]);
                g[w1_end + j] += dz;
                for c in 0..m {
                    g[j * m + c] += dz * self.inputs[(r, c)];
                }
            }
            g[v_end + task] += resid;
        }
        Ok(g * (2.0 / rows.len() as f64))
    }
}
