use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn auxinash(args: &[&str], stdin: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_auxinash"))
        .args(args)
        .env_remove("AUXINASH_SEED")
        .env_remove("RUST_LOG")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(stdin.as_bytes())
        .unwrap();
    child.wait_with_output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

const ORTHONORMAL: &str =
    r#"{"gradients": [[1,0,0],[0,1,0],[0,0,1]], "preference": [0.2, 0.3, 0.5]}"#;

#[test]
fn solve_prints_square_root_weights() {
    let out = auxinash(&["solve"], ORTHONORMAL);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let alpha: Vec<f64> = serde_json::from_value(v["alpha"].clone()).unwrap();
    for (a, p) in alpha.iter().zip([0.2f64, 0.3, 0.5]) {
        assert!((a - p.sqrt()).abs() < 1e-6);
    }
    assert_eq!(v["converged"], true);
    let dir: Vec<f64> = serde_json::from_value(v["direction"].clone()).unwrap();
    let norm2: f64 = dir.iter().map(|x| x * x).sum();
    assert!((norm2 - 1.0).abs() < 1e-5);
}

#[test]
fn solve_output_is_byte_identical_across_runs() {
    let input = r#"{"gradients": [[1,0.2,0],[0.3,1,0.5],[0,-0.4,1.2]]}"#;
    let a = auxinash(&["solve"], input);
    let b = auxinash(&["solve"], input);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn solve_reads_and_writes_files() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.json");
    let output = dir.path().join("out.json");
    std::fs::write(&input, ORTHONORMAL).unwrap();
    let out = auxinash(
        &[
            "solve",
            "--input",
            input.to_str().unwrap(),
            "--output",
            output.to_str().unwrap(),
            "--set",
            "fixed_point_tolerance=1e-10",
        ],
        "",
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&output).unwrap()).unwrap();
    assert!(v["residual"].as_f64().unwrap() <= 1e-10);
}

#[test]
fn usage_errors_exit_two() {
    for (args, stdin, needle) in [
        (vec!["solve"], "not json", "invalid solve input"),
        (
            vec!["solve"],
            r#"{"gradients": [[1,0],[0,1]], "preference": [0.6, 0.6]}"#,
            "prefer",
        ),
        (
            vec!["solve"],
            r#"{"gradients": [[1,0],[0,1]], "extra": 1}"#,
            "extra",
        ),
        (
            vec!["solve", "--set", "no_such_key=1"],
            ORTHONORMAL,
            "no_such_key",
        ),
        (vec!["recipe", "nonsense"], "", "nonsense"),
        (vec!["recipe", "steer", "--jobs", "0"], "", "--jobs"),
    ] {
        let out = auxinash(&args, stdin);
        assert_eq!(code(&out), 2, "{args:?}: {}", stderr(&out));
        let err = stderr(&out);
        assert!(err.starts_with("error[usage]:"), "{err}");
        assert!(err.to_lowercase().contains(&needle.to_lowercase()), "{err}");
    }
    let out = auxinash(&[], "");
    assert_eq!(code(&out), 2);
    let out = auxinash(&["solve", "--bogus"], "");
    assert_eq!(code(&out), 2);
}

#[test]
fn stationary_gradients_exit_three() {
    let out = auxinash(&["solve"], r#"{"gradients": [[0,0],[0,0]]}"#);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).starts_with("error[numerical]:"));
}

#[test]
fn help_is_available_for_every_subcommand() {
    for sub in ["solve", "grad-check", "train", "recipe"] {
        let out = auxinash(&[sub, "--help"], "");
        assert_eq!(code(&out), 0);
        assert!(stdout(&out).contains("Usage"), "{sub}");
    }
    let out = auxinash(&["--help"], "");
    assert_eq!(code(&out), 0);
    for sub in ["solve", "grad-check", "train", "recipe"] {
        assert!(stdout(&out).contains(sub));
    }
}

#[test]
fn grad_check_passes() {
    let out = auxinash(&["grad-check", "--seed", "3"], "");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let entries: Vec<serde_json::Value> = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(entries.len(), 7);
    assert!(entries.iter().all(|e| e["pass"] == true));
}

#[test]
fn train_writes_trajectory_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("traj.csv");
    let job = r#"{"suite": {"kind": "two_task_quadratic"}, "init": [2.0, 2.0], "init_prefs": [0.3, 0.7]}"#;
    let args = [
        "train",
        "--output",
        csv.to_str().unwrap(),
        "--seed",
        "5",
        "--set",
        "outer_iters=2",
        "--set",
        "pref_update_period=5",
    ];
    let out = auxinash(&args, job);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 10);
    let meta_path = Path::new(&format!("{}.meta.json", csv.display())).to_path_buf();
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&meta_path).unwrap()).unwrap();
    assert_eq!(meta["seed"], 5);
    assert_eq!(meta["steps"], 10);
    assert_eq!(meta["termination"]["kind"], "completed");
    assert_eq!(meta["config"]["outer_iters"], 2);

    let again = auxinash(&args, job);
    assert_eq!(code(&again), 0);
    assert_eq!(std::fs::read_to_string(&csv).unwrap(), text);
}

#[test]
fn train_rejects_bad_jobs() {
    let out = auxinash(&["train"], r#"{"suite": {"kind": "cubic"}}"#);
    assert_eq!(code(&out), 2);
    let out = auxinash(
        &["train", "--set", "step_mode=theorem1"],
        r#"{"suite": {"kind": "two_task_quadratic"}}"#,
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("plain_sgd"));
}

#[test]
fn recipe_writes_manifest_and_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let out = auxinash(
        &[
            "recipe",
            "directions",
            "--output",
            dir.path().to_str().unwrap(),
        ],
        "",
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("PASS projection_equals_p_over_alpha"));
    assert!(!text.contains("FAIL"));
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn recipe_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    // a zero tolerance cannot be met by any grid point
    let out = auxinash(
        &[
            "recipe",
            "directions",
            "--output",
            dir.path().to_str().unwrap(),
            "--set",
            "recipe.tolerance=0",
        ],
        "",
    );
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stdout(&out).contains("FAIL"));
}

#[test]
fn recipe_config_file_is_layered() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("steer.json");
    std::fs::write(
        &cfg,
        r#"{"recipe": {"name": "steer", "grid": [0.2, 0.8]}, "train": {"outer_iters": 60}}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = auxinash(
        &[
            "recipe",
            "steer",
            "--config",
            cfg.to_str().unwrap(),
            "--output",
            out_dir.to_str().unwrap(),
            "--seed",
            "4",
        ],
        "",
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["seeds"], serde_json::json!([4]));
    assert_eq!(
        manifest["config"]["recipe"]["grid"],
        serde_json::json!([0.2, 0.8])
    );
}
