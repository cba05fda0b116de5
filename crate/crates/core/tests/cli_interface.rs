//! Black-box checks of the command-line binary: exit codes, validation
//! messages, and trace determinism, driven through real process spawns.

use std::path::Path;
use std::process::{Command, Output};

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ccopt"))
}

fn run_with_config(config: &Path, out: &Path) -> Output {
    binary()
        .args(["run", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary spawns")
}

fn write_config(dir: &Path, name: &str, body: &serde_json::Value) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(body).unwrap()).unwrap();
    path
}

fn small_config(gamma: f64, beta: f64) -> serde_json::Value {
    serde_json::json!({
        "version": 1,
        "problem": {
            "source": "random_quadratic",
            "n_agents": 3,
            "local_dim": 2,
            "constraint_dim": 1,
            "edge_prob": 0.7,
            "seed": 3
        },
        "params": { "gamma": gamma, "kappa": 1.0, "rho": 1.0, "beta": beta },
        "schedule": { "kind": "sync" },
        "p_drop": 0.0,
        "seed": 0,
        "tol_d": 1e-8,
        "max_iter": 200000
    })
}

#[test]
fn shipped_demo_config_converges_with_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quadratic_demo.json");
    let out = run_with_config(&config, dir.path());
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["status"], "Converged");
    assert!(summary["final_d"].as_f64().unwrap() <= 1e-8);
    assert!(dir.path().join("trace.csv").exists());
    assert!(dir.path().join("convergence.svg").exists());
}

#[test]
fn out_of_range_beta_exits_one_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "bad_beta.json", &small_config(0.05, 1.5));
    let out = run_with_config(&config, &dir.path().join("artifacts"));
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("beta"),
        "stderr does not name the field: {stderr}"
    );
}

#[test]
fn huge_step_size_exits_three_as_diverged() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "huge_gamma.json", &small_config(1e3, 0.5));
    let out = run_with_config(&config, &dir.path().join("artifacts"));
    assert_eq!(
        out.status.code(),
        Some(3),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn identical_configs_produce_byte_identical_traces() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "async.json",
        &serde_json::json!({
            "version": 1,
            "problem": {
                "source": "random_quadratic",
                "n_agents": 4,
                "local_dim": 2,
                "constraint_dim": 2,
                "edge_prob": 0.6,
                "seed": 5
            },
            "params": { "gamma": 0.05, "kappa": 1.0, "rho": 1.0, "beta": 0.5 },
            "schedule": { "kind": "async", "p_act": 0.5 },
            "p_drop": 0.2,
            "seed": 9,
            "tol_d": 1e-6,
            "max_iter": 200000
        }),
    );
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    assert_eq!(run_with_config(&config, &out_a).status.code(), Some(0));
    assert_eq!(run_with_config(&config, &out_b).status.code(), Some(0));
    let trace_a = std::fs::read(out_a.join("trace.csv")).unwrap();
    let trace_b = std::fs::read(out_b.join("trace.csv")).unwrap();
    assert!(!trace_a.is_empty());
    assert_eq!(
        trace_a, trace_b,
        "same config and seed must replay identically"
    );
}

#[test]
fn compare_with_degenerate_schedule_emits_identical_curves() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "degenerate.json",
        &serde_json::json!({
            "version": 1,
            "problem": {
                "source": "random_quadratic",
                "n_agents": 3,
                "local_dim": 2,
                "constraint_dim": 1,
                "edge_prob": 0.7,
                "seed": 3
            },
            "params": { "gamma": 0.05, "kappa": 1.0, "rho": 1.0, "beta": 0.5 },
            "schedule": { "kind": "async", "p_act": 1.0 },
            "p_drop": 0.0,
            "seed": 4,
            "tol_d": 1e-8,
            "max_iter": 200000
        }),
    );
    let out_dir = dir.path().join("artifacts");
    let out = binary()
        .args(["compare", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .expect("binary spawns");
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let sync_trace = std::fs::read(out_dir.join("sync_trace.csv")).unwrap();
    let async_trace = std::fs::read(out_dir.join("async_trace.csv")).unwrap();
    assert_eq!(
        sync_trace, async_trace,
        "p_act=1, p_drop=0 must replay the synchronous run"
    );
}

#[test]
fn verify_passes_on_the_shipped_demo_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quadratic_demo.json");
    let out = binary()
        .args(["verify", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path())
        .output()
        .expect("binary spawns");
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        !stdout.contains("[FAIL]"),
        "verify table reports a failure:\n{stdout}"
    );
    assert!(dir.path().join("certificates.json").exists());
}
