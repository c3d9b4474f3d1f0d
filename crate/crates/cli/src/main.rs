//! `auxinash` command-line front end.
//!
//! Exit codes: 0 success, 1 failed checks, 2 usage or configuration error,
//! 3 numerical failure. Every error is reported as one line on stderr.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use auxinash::bargaining::{solve_alpha, PreferenceVector, SolverConfig, TaskGradientSet};
use auxinash::diffmodels::{
    make_illustrative_with_noise, make_quadratic, make_toy_mlp, two_task_quadratic_spec,
    QuadraticSuiteSpec, TaskSuite,
};
use auxinash::harness::{self, RecipeName, RecipeSpec};
use auxinash::trainer::{train, TrainConfig};
use auxinash::{DMatrix, DVector, Error};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "auxinash",
    version,
    about = "Preference-weighted Nash bargaining for auxiliary-task learning"
)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug, -vvv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the bargaining fixed point GᵀGα = p/α for one gradient set.
    Solve(SolveArgs),
    /// Run the finite-difference validation battery.
    GradCheck(GradCheckArgs),
    /// Train on a task suite and write the trajectory CSV.
    Train(TrainArgs),
    /// Run an experiment recipe and write its artifacts and manifest.
    Recipe(RecipeArgs),
}

#[derive(Args)]
struct Common {
    /// JSON configuration file layered over the built-in defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set solver.max_ccp_iters=50`.
    /// Repeatable; applied after the configuration file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct SolveArgs {
    /// Input JSON `{"gradients": [[...], ...], "preference": [...]}`; `-`
    /// reads standard input. `preference` defaults to uniform.
    #[arg(long, value_name = "FILE", default_value = "-")]
    input: String,

    /// Output JSON file; `-` writes standard output.
    #[arg(long, value_name = "FILE", default_value = "-")]
    output: String,

    /// Solver configuration (keys of the solver settings).
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Seed of the random evaluation points.
    #[arg(long, env = "AUXINASH_SEED", default_value_t = 0)]
    seed: u64,

    /// Output JSON report; `-` writes standard output.
    #[arg(long, value_name = "FILE", default_value = "-")]
    output: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Job JSON `{"suite": {...}, "init": [...], "init_prefs": [...]}`; `-`
    /// reads standard input.
    #[arg(long, value_name = "FILE", default_value = "-")]
    input: String,

    /// Trajectory CSV; run metadata goes to `<output>.meta.json`.
    #[arg(long, value_name = "FILE", default_value = "trajectory.csv")]
    output: PathBuf,

    /// Training seed; overrides the configured `seed`.
    #[arg(long, env = "AUXINASH_SEED")]
    seed: Option<u64>,

    /// Training configuration (keys of the training settings).
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct RecipeArgs {
    /// Recipe: illustrative, steer, directions, convergence or aux_set_ablation.
    name: String,

    /// Output directory; overrides the recipe's `output_dir`.
    #[arg(long, value_name = "DIR")]
    output: Option<PathBuf>,

    /// Run this single seed instead of the recipe's seed list.
    #[arg(long, env = "AUXINASH_SEED")]
    seed: Option<u64>,

    /// Worker threads for independent runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,

    /// Recipe spec (`recipe`, `seeds`, `output_dir`, `train`).
    #[command(flatten)]
    common: Common,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn numerical(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::DimensionMismatch(_)
            | Error::Empty(_)
            | Error::InvalidPreference(_)
            | Error::InvalidConfig(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => Self::usage(e.to_string()),
            _ => Self::numerical(e.to_string()),
        }
    }
}

type Outcome = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let outcome = match cli.command {
        Command::Solve(args) => solve(args),
        Command::GradCheck(args) => grad_check(args),
        Command::Train(args) => train_cmd(args),
        Command::Recipe(args) => recipe(args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            let kind = match f.code {
                2 => "usage",
                3 => "numerical",
                _ => "failure",
            };
            eprintln!("error[{kind}]: {}", f.message.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}

fn read_input(input: &str) -> Result<String, Failure> {
    if input == "-" {
        let mut text = String::new();
        io::stdin()
            .read_to_string(&mut text)
            .map_err(|e| Failure::usage(format!("cannot read standard input: {e}")))?;
        Ok(text)
    } else {
        fs::read_to_string(input).map_err(|e| Failure::usage(format!("cannot read {input}: {e}")))
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<T, Failure> {
    serde_json::from_str(text).map_err(|e| Failure::usage(format!("invalid {what}: {e}")))
}

fn read_config(path: Option<&Path>) -> Result<Option<Value>, Failure> {
    path.map(|p| parse_json(&read_input(&p.display().to_string())?, "configuration file"))
        .transpose()
}

fn write_output(output: &str, text: &str) -> Result<(), Failure> {
    if output == "-" {
        io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::usage(format!("cannot write standard output: {e}")))
    } else {
        fs::write(output, text).map_err(|e| Failure::usage(format!("cannot write {output}: {e}")))
    }
}

/// A float with 17 significant digits; non-finite values become `null`.
fn float17(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        "null".to_string()
    }
}

fn array17(values: &[f64]) -> String {
    let items: Vec<String> = values.iter().map(|x| float17(*x)).collect();
    format!("[{}]", items.join(", "))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SolveInput {
    gradients: Vec<Vec<f64>>,
    preference: Option<Vec<f64>>,
}

fn solve(args: SolveArgs) -> Outcome {
    let cfg: SolverConfig = harness::resolve(
        &SolverConfig::default(),
        read_config(args.common.config.as_deref())?,
        &args.common.overrides,
    )?;
    cfg.validate()?;
    let input: SolveInput = parse_json(&read_input(&args.input)?, "solve input")?;
    let grads =
        TaskGradientSet::new(&input.gradients).map_err(|e| Failure::usage(e.to_string()))?;
    let prefs = match &input.preference {
        Some(p) => PreferenceVector::from_probs(p)?,
        None => PreferenceVector::uniform(grads.num_tasks())?,
    };
    let weights = solve_alpha(&grads, &prefs, &cfg)?;
    let direction = grads.gradients() * &weights.alpha;
    let text = format!(
        "{{\n  \"alpha\": {},\n  \"residual\": {},\n  \"direction\": {},\n  \"converged\": {}\n}}\n",
        array17(weights.alpha.as_slice()),
        float17(weights.residual_inf),
        array17(direction.as_slice()),
        weights.converged
    );
    write_output(&args.output, &text)?;
    if weights.converged {
        Ok(0)
    } else {
        Err(Failure::numerical(format!(
            "solver did not converge (residual {:.3e})",
            weights.residual_inf
        )))
    }
}

fn grad_check(args: GradCheckArgs) -> Outcome {
    let entries = harness::run_grad_check(args.seed)?;
    let mut text = serde_json::to_string_pretty(&entries).map_err(Error::from)?;
    text.push('\n');
    write_output(&args.output, &text)?;
    let failed: Vec<&str> = entries
        .iter()
        .filter(|e| !e.pass)
        .map(|e| e.test.as_str())
        .collect();
    if failed.is_empty() {
        Ok(0)
    } else {
        eprintln!("error[check]: failed {}", failed.join(", "));
        Ok(1)
    }
}

/// Task suites a training job can name.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum SuiteSpec {
    /// `ℓ_i(θ) = ½(θ − c_i)ᵀA_i(θ − c_i)` with row-major `A_i`.
    Quadratic {
        matrices: Vec<Vec<Vec<f64>>>,
        centers: Vec<Vec<f64>>,
    },
    TwoTaskQuadratic,
    Illustrative {
        #[serde(default = "default_samples")]
        samples: usize,
        #[serde(default = "default_noise_scale")]
        noise_scale: f64,
    },
    ToyMlp {
        hidden: usize,
        tasks: usize,
    },
}

fn default_samples() -> usize {
    1000
}

fn default_noise_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainJob {
    suite: SuiteSpec,
    /// Initial parameters; zeros (or the network's seeded initialisation)
    /// when absent.
    init: Option<Vec<f64>>,
    /// Initial preferences; uniform when absent.
    init_prefs: Option<Vec<f64>>,
}

fn quadratic_spec(
    matrices: &[Vec<Vec<f64>>],
    centers: &[Vec<f64>],
) -> Result<QuadraticSuiteSpec, Failure> {
    let matrices = matrices
        .iter()
        .map(|rows| {
            let n = rows.len();
            if rows.iter().any(|r| r.len() != n) {
                return Err(Failure::usage("quadratic matrices must be square"));
            }
            Ok(DMatrix::from_row_iterator(
                n,
                n,
                rows.iter().flatten().copied(),
            ))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let centers = centers
        .iter()
        .map(|c| DVector::from_column_slice(c))
        .collect();
    Ok(QuadraticSuiteSpec { matrices, centers })
}

fn run_job<S: TaskSuite>(
    suite: &S,
    job: &TrainJob,
    cfg: &TrainConfig,
    default_init: DVector<f64>,
) -> Result<auxinash::trainer::Trajectory, Failure> {
    let init = job
        .init
        .as_ref()
        .map(|v| DVector::from_column_slice(v))
        .unwrap_or(default_init);
    let prefs = match &job.init_prefs {
        Some(p) => PreferenceVector::from_probs(p)?,
        None => PreferenceVector::uniform(suite.num_tasks())?,
    };
    Ok(train(suite, cfg, &init, &prefs)?)
}

fn train_cmd(args: TrainArgs) -> Outcome {
    let mut overrides = args.common.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg: TrainConfig = harness::resolve(
        &TrainConfig::default(),
        read_config(args.common.config.as_deref())?,
        &overrides,
    )?;
    cfg.validate()?;
    let job: TrainJob = parse_json(&read_input(&args.input)?, "training job")?;
    let traj = match &job.suite {
        SuiteSpec::Quadratic { matrices, centers } => {
            let suite = make_quadratic(quadratic_spec(matrices, centers)?)?;
            let zeros = DVector::zeros(suite.param_dim());
            run_job(&suite, &job, &cfg, zeros)?
        }
        SuiteSpec::TwoTaskQuadratic => {
            let suite = make_quadratic(two_task_quadratic_spec())?;
            run_job(&suite, &job, &cfg, DVector::zeros(2))?
        }
        SuiteSpec::Illustrative {
            samples,
            noise_scale,
        } => {
            let (suite, _, _) = make_illustrative_with_noise(*samples, cfg.seed, *noise_scale)?;
            run_job(&suite, &job, &cfg, DVector::zeros(2))?
        }
        SuiteSpec::ToyMlp { hidden, tasks } => {
            let suite = make_toy_mlp(*hidden, *tasks, cfg.seed)?;
            let init = suite.init_params(cfg.seed);
            run_job(&suite, &job, &cfg, init)?
        }
    };
    traj.write_csv(&args.output)?;
    let meta = json!({
        "job": job,
        "config": cfg,
        "seed": cfg.seed,
        "git_revision": harness::git_revision(),
        "termination": traj.termination,
        "steps": traj.records.len(),
        "smoothness": traj.smoothness,
        "pref_updates": traj.pref_updates,
        "skipped_pref_updates": traj.skipped_pref_updates,
        "skipped_steps": traj.skipped_steps,
        "fallback_steps": traj.fallback_steps,
        "final_params": traj.final_params(),
    });
    let mut sidecar = args.output.clone().into_os_string();
    sidecar.push(".meta.json");
    harness::write_json(Path::new(&sidecar), &meta)?;
    match &traj.termination {
        auxinash::trainer::Termination::Diverged { reason, .. }
        | auxinash::trainer::Termination::SolverFailed { reason, .. } => {
            Err(Failure::numerical(reason.clone()))
        }
        _ => Ok(0),
    }
}

fn recipe(args: RecipeArgs) -> Outcome {
    let name: RecipeName = args.name.parse()?;
    if args.jobs == 0 {
        return Err(Failure::usage("--jobs must be >= 1"));
    }
    let mut spec = RecipeSpec::resolve(
        name,
        read_config(args.common.config.as_deref())?,
        &args.common.overrides,
    )?;
    if let Some(dir) = args.output {
        spec.output_dir = dir;
    }
    if let Some(seed) = args.seed {
        spec.seeds = vec![seed];
    }
    let manifest = harness::run_recipe(&spec, args.jobs)?;
    for c in &manifest.checks {
        let seed = c.seed.map(|s| format!(" seed={s}")).unwrap_or_default();
        let verdict = match (c.passed, c.asserted) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "NOTE",
        };
        println!(
            "{verdict} {}{seed} value={:.6e} threshold={:.6e}",
            c.name, c.value, c.threshold
        );
    }
    println!(
        "manifest {}",
        harness::RunManifest::path_in(&spec.output_dir).display()
    );
    Ok(if manifest.passed() { 0 } else { 1 })
}
