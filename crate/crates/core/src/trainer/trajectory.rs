//! Per-step training records and their CSV form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Per-task training losses at the parameters before the step.
    pub losses: Vec<f64>,
    pub probs: Vec<f64>,
    pub alpha: Vec<f64>,
    pub residual: f64,
    /// Step size applied to `Gα`; zero when no update was taken.
    pub mu: f64,
    pub sigma_min: f64,
    pub min_norm_combo: f64,
    pub val_loss: f64,
}

impl StepRecord {
    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }
}

/// Why training stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Termination {
    Completed,
    /// The min-norm combination fell below the stationarity threshold or all
    /// gradients vanished; no further updates were made.
    ParetoStationary {
        step: usize,
    },
    /// A loss or update became non-finite.
    Diverged {
        step: usize,
        reason: String,
    },
    /// The bargaining solver failed numerically.
    SolverFailed {
        step: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub num_tasks: usize,
    pub records: Vec<StepRecord>,
    /// Parameters before each recorded step, followed by the final
    /// parameters (one more entry than `records`).
    pub params: Vec<Vec<f64>>,
    /// The direction `Gα` of each recorded step; zero for skipped steps and
    /// absent for a final halting record.
    pub directions: Vec<Vec<f64>>,
    pub termination: Termination,
    /// Smoothness constant used by the `theorem1` step rule.
    pub smoothness: Option<f64>,
    pub pref_updates: usize,
    /// Preference updates skipped because the solve did not converge.
    pub skipped_pref_updates: usize,
    /// Minibatch steps that made no update because the batch was stationary.
    pub skipped_steps: usize,
    /// Minibatch steps that fell back to the preference-weighted gradient.
    pub fallback_steps: usize,
}

impl Trajectory {
    pub fn final_params(&self) -> &[f64] {
        self.params.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn final_probs(&self) -> Option<&[f64]> {
        self.records.last().map(|r| r.probs.as_slice())
    }

    pub fn csv_header(num_tasks: usize) -> Vec<String> {
        let mut header = vec!["step".to_string()];
        for prefix in ["loss", "p", "alpha"] {
            header.extend((0..num_tasks).map(|k| format!("{prefix}_{k}")));
        }
        header.extend(
            ["residual", "mu", "sigma_min", "min_norm_combo", "val_loss"]
                .iter()
                .map(|s| s.to_string()),
        );
        header
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(Self::csv_header(self.num_tasks))?;
        for r in &self.records {
            let mut row = vec![r.step.to_string()];
            for v in r.losses.iter().chain(&r.probs).chain(&r.alpha) {
                row.push(v.to_string());
            }
            for v in [r.residual, r.mu, r.sigma_min, r.min_norm_combo, r.val_loss] {
                row.push(v.to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the records of a trajectory CSV.
    pub fn read_csv(path: &Path) -> Result<Vec<StepRecord>> {
        let mut reader = csv::Reader::from_path(path)?;
        let header = reader.headers()?.clone();
        let k = header.iter().filter(|h| h.starts_with("loss_")).count();
        let expected = Self::csv_header(k);
        if header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(Error::InvalidConfig(format!(
                "unexpected trajectory header in {}",
                path.display()
            )));
        }
        let mut records = Vec::new();
        for row in reader.records() {
            let row = row?;
            let num = |i: usize| -> Result<f64> {
                row[i].parse::<f64>().map_err(|e| {
                    Error::InvalidConfig(format!("column {} of {}: {e}", i, path.display()))
                })
            };
            let vec_at =
                |start: usize| -> Result<Vec<f64>> { (start..start + k).map(num).collect() };
            let tail = 1 + 3 * k;
            records.push(StepRecord {
                step: row[0].parse().map_err(|e| {
                    Error::InvalidConfig(format!("step column of {}: {e}", path.display()))
                })?,
                losses: vec_at(1)?,
                probs: vec_at(1 + k)?,
                alpha: vec_at(1 + 2 * k)?,
                residual: num(tail)?,
                mu: num(tail + 1)?,
                sigma_min: num(tail + 2)?,
                min_norm_combo: num(tail + 3)?,
                val_loss: num(tail + 4)?,
            });
        }
        Ok(records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let record = StepRecord {
            step: 3,
            losses: vec![0.1, 1.0 / 3.0],
            probs: vec![0.25, 0.75],
            alpha: vec![0.5, 0.866],
            residual: 1e-9,
            mu: 0.01,
            sigma_min: 0.2,
            min_norm_combo: 0.7,
            val_loss: f64::NAN,
        };
        let traj = Trajectory {
            num_tasks: 2,
            records: vec![record.clone()],
            params: vec![vec![0.0], vec![1.0]],
            directions: vec![vec![1.0]],
            termination: Termination::Completed,
            smoothness: None,
            pref_updates: 0,
            skipped_pref_updates: 0,
            skipped_steps: 0,
            fallback_steps: 0,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        traj.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            "step,loss_0,loss_1,p_0,p_1,alpha_0,alpha_1,residual,mu,sigma_min,min_norm_combo,val_loss\n"
        ));
        let back = Trajectory::read_csv(&path).unwrap();
        assert_eq!(back[0].losses, record.losses);
        assert_eq!(back[0].alpha, record.alpha);
        assert!(back[0].val_loss.is_nan());
    }
}
