//! Experiment recipes, artifact checkers and run manifests.
//!
//! Every recipe writes its artifacts as CSV into the output directory, then
//! evaluates its checks by re-reading those files, and finally writes a
//! `manifest.json` listing artifacts and verdicts.

mod checks;
mod config;
mod gradcheck;
mod recipes;
mod table;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{
    InnerOptimizer, PrefUpdateRule, StationaryBatchPolicy, StepMode, TrainConfig,
};

pub use checks::{
    check_ablation, check_convergence, check_directions, check_illustrative, check_steer,
    pareto_front_distance, CheckResult,
};
pub use config::{apply_override, merge_json, resolve};
pub use gradcheck::{run_grad_check, GradCheckEntry};
pub use recipes::{
    run_aux_set_ablation, run_convergence, run_directions, run_illustrative, run_steer,
};

/// Preference grid of the steering sweep.
pub const STEER_GRID: [f64; 11] = [0.01, 0.1, 0.2, 0.25, 0.4, 0.5, 0.6, 0.75, 0.8, 0.9, 0.99];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecipeName {
    Illustrative,
    Steer,
    Directions,
    Convergence,
    AuxSetAblation,
}

impl RecipeName {
    pub const ALL: [RecipeName; 5] = [
        RecipeName::Illustrative,
        RecipeName::Steer,
        RecipeName::Directions,
        RecipeName::Convergence,
        RecipeName::AuxSetAblation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RecipeName::Illustrative => "illustrative",
            RecipeName::Steer => "steer",
            RecipeName::Directions => "directions",
            RecipeName::Convergence => "convergence",
            RecipeName::AuxSetAblation => "aux_set_ablation",
        }
    }
}

impl fmt::Display for RecipeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RecipeName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let normalized = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|r| r.as_str() == normalized)
            .ok_or_else(|| {
                let known: Vec<&str> = Self::ALL.iter().map(|r| r.as_str()).collect();
                Error::InvalidConfig(format!(
                    "unknown recipe `{s}` (expected one of {})",
                    known.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IllustrativeParams {
    /// Training samples; an independent held-out set of the same size is
    /// drawn for evaluation.
    pub samples: usize,
    /// Multiplier on all three noise scales.
    pub noise_scale: f64,
    pub init: Vec<f64>,
    /// Points per axis of the main-loss landscape grid.
    pub landscape_resolution: usize,
    /// `[w1_min, w1_max, w2_min, w2_max]`.
    pub landscape_bounds: [f64; 4],
    pub harmful_threshold: f64,
}

impl Default for IllustrativeParams {
    fn default() -> Self {
        Self {
            samples: 1000,
            noise_scale: 1.0,
            init: vec![-3.0, -1.0],
            landscape_resolution: 201,
            landscape_bounds: [-2.0, 2.0, -2.0, 5.0],
            harmful_threshold: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteerParams {
    /// Fixed values of `p_0`; `p_1 = 1 − p_0`.
    pub grid: Vec<f64>,
    pub init: Vec<f64>,
    /// Minimum pairwise endpoint separation in objective space.
    pub min_separation: f64,
    /// Maximum distance of an endpoint from the analytic Pareto set.
    pub front_tolerance: f64,
    /// Maximum angle between uniform-preference and Nash-MTL directions.
    pub angle_tolerance: f64,
}

impl Default for SteerParams {
    fn default() -> Self {
        Self {
            grid: STEER_GRID.to_vec(),
            init: vec![2.0, 2.0],
            min_separation: 1e-4,
            front_tolerance: 1e-2,
            angle_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DirectionsParams {
    /// Task gradients, one row per task.
    pub gradients: Vec<Vec<f64>>,
    /// Grid spacing `1/resolution` over the open simplex.
    pub resolution: usize,
    pub tolerance: f64,
}

impl Default for DirectionsParams {
    fn default() -> Self {
        Self {
            gradients: vec![
                vec![1.0, 0.2, 0.0],
                vec![0.0, 1.0, 0.3],
                vec![0.4, 0.0, 1.0],
            ],
            resolution: 5,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConvergenceSuite {
    TwoTaskQuadratic,
    SingleTaskQuadratic,
    ToyMlp { hidden: usize, tasks: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceParams {
    pub suite: ConvergenceSuite,
    /// Initial parameters; `None` uses the suite's default start.
    pub init: Option<Vec<f64>>,
    pub min_norm_target: f64,
    /// Required fraction of steps with non-increasing mean loss.
    pub monotone_fraction: f64,
}

impl Default for ConvergenceParams {
    fn default() -> Self {
        Self {
            suite: ConvergenceSuite::TwoTaskQuadratic,
            init: None,
            min_norm_target: 1e-3,
            monotone_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationParams {
    pub samples: usize,
    pub init: Vec<f64>,
    /// Main-only baselines are averaged over this many data orders (and, for
    /// the partial-data baseline, held-out draws).
    pub baseline_replicates: usize,
}

impl Default for AblationParams {
    fn default() -> Self {
        Self {
            samples: 1000,
            init: vec![-3.0, -1.0],
            baseline_replicates: 100,
        }
    }
}

/// Recipe-specific parameters, tagged by recipe name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Recipe {
    Illustrative(IllustrativeParams),
    Steer(SteerParams),
    Directions(DirectionsParams),
    Convergence(ConvergenceParams),
    AuxSetAblation(AblationParams),
}

impl Recipe {
    pub fn name(&self) -> RecipeName {
        match self {
            Recipe::Illustrative(_) => RecipeName::Illustrative,
            Recipe::Steer(_) => RecipeName::Steer,
            Recipe::Directions(_) => RecipeName::Directions,
            Recipe::Convergence(_) => RecipeName::Convergence,
            Recipe::AuxSetAblation(_) => RecipeName::AuxSetAblation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeSpec {
    pub recipe: Recipe,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub train: TrainConfig,
}

/// Training settings of the illustrative problem: Adam at 1e-2, batches of
/// 256 and 160 preference updates, i.e. 4000 steps or 1000 epochs of 1000
/// samples.
pub fn illustrative_train_config() -> TrainConfig {
    TrainConfig {
        outer_iters: 160,
        batch_size: Some(256),
        pref_update_rule: PrefUpdateRule::ProjectedEuclidean,
        stationary_batch: StationaryBatchPolicy::Scalarize,
        ..TrainConfig::default()
    }
}

/// Guaranteed-descent step sizes with plain gradient steps over 5000 steps.
pub fn theorem1_train_config() -> TrainConfig {
    TrainConfig {
        outer_iters: 200,
        inner_optimizer: InnerOptimizer::PlainSgd,
        step_mode: StepMode::Theorem1,
        ..TrainConfig::default()
    }
}

impl RecipeSpec {
    pub fn default_for(name: RecipeName) -> Self {
        let (recipe, train, seeds) = match name {
            RecipeName::Illustrative => (
                Recipe::Illustrative(IllustrativeParams::default()),
                illustrative_train_config(),
                vec![0, 1, 2],
            ),
            RecipeName::Steer => (
                Recipe::Steer(SteerParams::default()),
                TrainConfig {
                    pref_lr: 0.0,
                    ..theorem1_train_config()
                },
                vec![0],
            ),
            RecipeName::Directions => (
                Recipe::Directions(DirectionsParams::default()),
                TrainConfig::default(),
                vec![0],
            ),
            RecipeName::Convergence => (
                Recipe::Convergence(ConvergenceParams::default()),
                theorem1_train_config(),
                vec![0],
            ),
            RecipeName::AuxSetAblation => (
                Recipe::AuxSetAblation(AblationParams::default()),
                illustrative_train_config(),
                vec![0],
            ),
        };
        Self {
            recipe,
            seeds,
            output_dir: PathBuf::from(format!("runs/{name}")),
            train,
        }
    }

    /// Layers a JSON document and `key=value` overrides over the defaults
    /// of `name`.
    pub fn resolve(
        name: RecipeName,
        file: Option<serde_json::Value>,
        overrides: &[String],
    ) -> Result<Self> {
        if let Some(other) = file
            .as_ref()
            .and_then(|f| f.pointer("/recipe/name"))
            .and_then(|n| n.as_str())
        {
            if other.parse::<RecipeName>()? != name {
                return Err(Error::InvalidConfig(format!(
                    "configuration is for recipe `{other}`, not `{name}`"
                )));
            }
        }
        let spec: Self = resolve(&Self::default_for(name), file, overrides)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seed list is empty".into()));
        }
        self.train.validate()?;
        match &self.recipe {
            Recipe::Illustrative(p) => {
                if p.samples < 2 {
                    return Err(Error::InvalidConfig(
                        "illustrative needs samples >= 2".into(),
                    ));
                }
                check_init(&p.init, 2)?;
                if p.landscape_resolution < 2 {
                    return Err(Error::InvalidConfig(
                        "landscape_resolution must be >= 2".into(),
                    ));
                }
                let [a, b, c, d] = p.landscape_bounds;
                if !(a < b && c < d) {
                    return Err(Error::InvalidConfig(
                        "landscape_bounds must be increasing pairs".into(),
                    ));
                }
            }
            Recipe::Steer(p) => {
                if p.grid.is_empty() {
                    return Err(Error::InvalidConfig("steer grid is empty".into()));
                }
                if let Some(v) = p.grid.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
                    return Err(Error::InvalidConfig(format!(
                        "steer grid value {v} is outside (0, 1)"
                    )));
                }
                check_init(&p.init, 2)?;
            }
            Recipe::Directions(p) => {
                if p.gradients.is_empty() {
                    return Err(Error::InvalidConfig("no gradients given".into()));
                }
                if p.resolution < p.gradients.len() {
                    return Err(Error::InvalidConfig(format!(
                        "resolution {} leaves no interior grid point for {} tasks",
                        p.resolution,
                        p.gradients.len()
                    )));
                }
            }
            Recipe::Convergence(p) => {
                if let ConvergenceSuite::ToyMlp { hidden, tasks } = p.suite {
                    if hidden == 0 || tasks < 2 {
                        return Err(Error::InvalidConfig(
                            "toy MLP needs hidden >= 1 and tasks >= 2".into(),
                        ));
                    }
                }
                if !(0.0..=1.0).contains(&p.monotone_fraction) {
                    return Err(Error::InvalidConfig(
                        "monotone_fraction must lie in [0, 1]".into(),
                    ));
                }
            }
            Recipe::AuxSetAblation(p) => {
                if p.samples < 10 {
                    return Err(Error::InvalidConfig("ablation needs samples >= 10".into()));
                }
                check_init(&p.init, 2)?;
                if p.baseline_replicates == 0 {
                    return Err(Error::InvalidConfig(
                        "baseline_replicates must be >= 1".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

fn check_init(init: &[f64], dim: usize) -> Result<()> {
    if init.len() != dim {
        return Err(Error::DimensionMismatch(format!(
            "initial parameters have length {}, expected {dim}",
            init.len()
        )));
    }
    if !init.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("initial parameters"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub recipe: RecipeName,
    /// The fully resolved spec.
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub git_revision: String,
    pub artifacts: Vec<PathBuf>,
    pub checks: Vec<CheckResult>,
}

impl RunManifest {
    /// True when every asserted check passed.
    pub fn passed(&self) -> bool {
        self.checks.iter().filter(|c| c.asserted).all(|c| c.passed)
    }

    pub fn path_in(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }
}

/// Runs a recipe, writes `manifest.json` into its output directory and
/// returns the manifest. Independent runs are spread over `jobs` threads.
pub fn run_recipe(spec: &RecipeSpec, jobs: usize) -> Result<RunManifest> {
    spec.validate()?;
    std::fs::create_dir_all(&spec.output_dir)?;
    let (artifacts, checks) = match &spec.recipe {
        Recipe::Illustrative(p) => run_illustrative(p, spec, jobs)?,
        Recipe::Steer(p) => run_steer(p, spec, jobs)?,
        Recipe::Directions(p) => run_directions(p, spec)?,
        Recipe::Convergence(p) => run_convergence(p, spec, jobs)?,
        Recipe::AuxSetAblation(p) => run_aux_set_ablation(p, spec, jobs)?,
    };
    if let Some(missing) = artifacts.iter().find(|a| !a.exists()) {
        return Err(Error::InvalidConfig(format!(
            "artifact {} was not written",
            missing.display()
        )));
    }
    let manifest = RunManifest {
        recipe: spec.recipe.name(),
        config: serde_json::to_value(spec)?,
        seeds: spec.seeds.clone(),
        git_revision: git_revision(),
        artifacts,
        checks,
    };
    write_json(&RunManifest::path_in(&spec.output_dir), &manifest)?;
    Ok(manifest)
}

/// The current commit hash, or `"unknown"` outside a git checkout.
pub fn git_revision() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Maps `f` over `items` on a pool of `jobs` threads, keeping input order.
fn parallel_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start {jobs} workers: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn recipe_names_round_trip() {
        for name in RecipeName::ALL {
            assert_eq!(name.as_str().parse::<RecipeName>().unwrap(), name);
            assert_eq!(RecipeSpec::default_for(name).recipe.name(), name);
            RecipeSpec::default_for(name).validate().unwrap();
        }
        assert_eq!(
            "aux-set-ablation".parse::<RecipeName>().unwrap(),
            RecipeName::AuxSetAblation
        );
        assert!("nope".parse::<RecipeName>().is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        for name in RecipeName::ALL {
            let spec = RecipeSpec::default_for(name);
            let text = serde_json::to_string(&spec).unwrap();
            let back: RecipeSpec = serde_json::from_str(&text).unwrap();
            assert_eq!(back, spec);
        }
    }

    #[test]
    fn resolve_layers_and_rejects() {
        let file = json!({"recipe": {"grid": [0.3, 0.7]}, "seeds": [4]});
        let spec = RecipeSpec::resolve(
            RecipeName::Steer,
            Some(file),
            &["recipe.min_separation=0.01".to_string()],
        )
        .unwrap();
        match spec.recipe {
            Recipe::Steer(p) => {
                assert_eq!(p.grid, vec![0.3, 0.7]);
                assert_eq!(p.min_separation, 0.01);
            }
            other => panic!("wrong recipe {other:?}"),
        }
        assert_eq!(spec.seeds, vec![4]);

        let err = RecipeSpec::resolve(RecipeName::Steer, None, &["recipe.gird=[0.5]".into()])
            .unwrap_err();
        assert!(err.to_string().contains("recipe.gird"));
        let err = RecipeSpec::resolve(
            RecipeName::Steer,
            Some(json!({"recipe": {"gird": []}})),
            &[],
        )
        .unwrap_err();
        assert!(err.to_string().contains("gird"), "{err}");
        let err = RecipeSpec::resolve(RecipeName::Steer, None, &["recipe.grid=[]".into()]);
        assert!(err.is_err());
        let err = RecipeSpec::resolve(
            RecipeName::Steer,
            Some(json!({"recipe": {"name": "directions"}})),
            &[],
        );
        assert!(err.is_err());
    }
}
