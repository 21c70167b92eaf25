use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn gldof(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gldof"))
        .current_dir(dir)
        .env_remove("GLDOF_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(out: &Output) -> Value {
    ok(out);
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

const GEN: &[&str] = &[
    "gen", "--q", "20", "--block-sizes", "2,2,2,2,2", "--k-active", "2", "--sigma", "0.5",
    "--seed", "42", "--lambda-ratio", "0.5", "--no-timestamp",
];

fn generated(dir: &Path) {
    let mut args = GEN.to_vec();
    args.extend(["--out", "p.json"]);
    ok(&gldof(dir, &args));
}

/// `X = Id₂`, one block, `y = (3, 4)`.
fn identity_csv(dir: &Path) {
    std::fs::write(dir.join("x.csv"), "1,0\n0,1\n").unwrap();
    std::fs::write(dir.join("y.csv"), "3\n4\n").unwrap();
}

#[test]
fn gen_is_reproducible_and_seed_comes_from_env() {
    let dir = TempDir::new().unwrap();
    let a = gldof(dir.path(), GEN);
    let b = gldof(dir.path(), GEN);
    ok(&a);
    assert_eq!(a.stdout, b.stdout);

    let flags: Vec<&str> = GEN.iter().copied().filter(|a| *a != "--seed" && *a != "42").collect();
    let from_env = Command::new(env!("CARGO_BIN_EXE_gldof"))
        .env("GLDOF_SEED", "42")
        .args(&flags)
        .output()
        .unwrap();
    ok(&from_env);
    assert_eq!(from_env.stdout, a.stdout);

    let file = json(&a);
    assert_eq!(file["Q"], 20);
    assert_eq!(file["N"], 10);
    assert_eq!(file["manifest"]["seeds"]["scenario"], 42);
    assert!(file["manifest"].get("timestamp").is_none());
    assert!(file["lambda"].as_f64().unwrap() > 0.0);
}

#[test]
fn gen_without_active_blocks_has_zero_signal() {
    let dir = TempDir::new().unwrap();
    let file = json(&gldof(
        dir.path(),
        &["gen", "--q", "12", "--block-sizes", "3,3", "--k-active", "0", "--seed", "1"],
    ));
    assert!(floats(&file["beta0"]).iter().all(|b| *b == 0.0));
    assert!(file["manifest"]["timestamp"].is_string());
}

#[test]
fn gen_identity_design() {
    let dir = TempDir::new().unwrap();
    let file = json(&gldof(
        dir.path(),
        &["gen", "--q", "4", "--block-sizes", "2,2", "--identity", "--seed", "3", "--no-timestamp"],
    ));
    let rows: Vec<Vec<f64>> = file["X"].as_array().unwrap().iter().map(floats).collect();
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert_eq!(*v, if i == j { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn solve_identity_design_is_block_soft_thresholding() {
    let dir = TempDir::new().unwrap();
    identity_csv(dir.path());
    let args = [
        "solve", "--x-csv", "x.csv", "--y-csv", "y.csv", "--blocks", "2", "--lambda", "1",
        "--no-timestamp",
    ];
    let out = json(&gldof(dir.path(), &args));
    let beta = floats(&out["beta"]);
    assert!((beta[0] - 2.4).abs() < 1e-12 && (beta[1] - 3.2).abs() < 1e-12);
    assert_eq!(out["converged"], true);
    assert!(out["kkt_residual"].as_f64().unwrap() <= 1e-8);
    assert_eq!(out["lambda_max"].as_f64().unwrap(), 5.0);
    assert_eq!(out["manifest"]["inputs"].as_object().unwrap().len(), 2);
}

#[test]
fn dof_identity_closed_form() {
    let dir = TempDir::new().unwrap();
    identity_csv(dir.path());
    let out = json(&gldof(
        dir.path(),
        &["dof", "--x-csv", "x.csv", "--y-csv", "y.csv", "--blocks", "[[0,1]]", "--lambda", "1"],
    ));
    // |b| − λ(|b|−1)/‖y_b‖ = 2 − 1/5
    assert!((out["report"]["divergence"].as_f64().unwrap() - 1.8).abs() < 1e-12);
    assert_eq!(out["report"]["active_dim"], 2);

    let above = json(&gldof(
        dir.path(),
        &["dof", "--x-csv", "x.csv", "--y-csv", "y.csv", "--blocks", "2", "--lambda", "6"],
    ));
    assert_eq!(above["report"]["divergence"].as_f64().unwrap(), 0.0);
}

#[test]
fn warm_start_from_previous_solution() {
    let dir = TempDir::new().unwrap();
    generated(dir.path());
    ok(&gldof(dir.path(), &["solve", "--problem", "p.json", "--out", "s.json"]));
    let warm = json(&gldof(dir.path(), &["solve", "--problem", "p.json", "--warm-start", "s.json"]));
    let cold: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("s.json")).unwrap()).unwrap();
    assert_eq!(warm["active_blocks"], cold["active_blocks"]);
    for (a, b) in floats(&warm["beta"]).iter().zip(floats(&cold["beta"])) {
        assert!((a - b).abs() < 1e-6);
    }
    assert!(warm["iterations"].as_u64().unwrap() <= cold["iterations"].as_u64().unwrap());
}

#[test]
fn path_csv_with_manifest_sidecar() {
    let dir = TempDir::new().unwrap();
    generated(dir.path());
    let run = |jobs: &str, out: &str| {
        ok(&gldof(
            dir.path(),
            &[
                "path", "--problem", "p.json", "--grid-points", "8", "--jobs", jobs, "--out", out,
                "--no-timestamp",
            ],
        ));
        std::fs::read_to_string(dir.path().join(out)).unwrap()
    };
    let seq = run("1", "a.csv");
    assert_eq!(seq, run("1", "b.csv"));
    assert_eq!(run("2", "c.csv"), run("3", "d.csv"));

    let lines: Vec<&str> = seq.lines().collect();
    assert_eq!(lines[0], "lambda,dof,residual_sq,sure,gcv,cp,aic,active_dim,warning");
    assert_eq!(lines.len(), 9);
    assert!(!seq.contains('\r'));
    // 17 significant digits
    let lambda0 = lines[1].split(',').next().unwrap();
    assert_eq!(lambda0.split('e').next().unwrap().replace(['.', '-'], "").len(), 17);

    let manifest: Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("a.csv.manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["command"], "path");
    assert_eq!(manifest["options"]["sigma_source"], "problem_file");
    assert!(manifest["inputs"]["p.json"].as_str().unwrap().len() == 64);
}

#[test]
fn path_explicit_grid_is_sorted_decreasing() {
    let dir = TempDir::new().unwrap();
    generated(dir.path());
    let out = gldof(
        dir.path(),
        &["path", "--problem", "p.json", "--grid", "0.1,0.5,0.3", "--estimate-sigma"],
    );
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    let lambdas: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(lambdas, vec![0.5, 0.3, 0.1]);
}

#[test]
fn validate_fd_passes_and_fails_on_impossible_tolerance() {
    let dir = TempDir::new().unwrap();
    generated(dir.path());
    let out = json(&gldof(dir.path(), &["validate", "fd", "--problem", "p.json"]));
    assert_eq!(out["pass"], true);
    let strict = gldof(
        dir.path(),
        &["validate", "fd", "--problem", "p.json", "--rel-tol", "1e-15", "--abs-floor", "1e-300"],
    );
    assert_eq!(strict.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&strict.stderr).starts_with("FAIL"));
}

#[test]
fn validate_mc_is_deterministic_across_thread_counts() {
    let dir = TempDir::new().unwrap();
    let spec = r#"{"Q":20,"N":10,"block_sizes":[2,2,2,2,2],"k_active":2,"sigma":0.5,"seed":5}"#;
    std::fs::write(dir.path().join("spec.json"), spec).unwrap();
    let run = |jobs: &str| {
        gldof(
            dir.path(),
            &[
                "validate", "mc", "--spec", "spec.json", "--seed", "9", "--replicates", "200",
                "--jobs", jobs, "--no-timestamp",
            ],
        )
    };
    let one = json(&run("1"));
    let four = json(&run("4"));
    assert_eq!(one["result"], four["result"]);
    assert_eq!(one["pass"], true);
    assert_eq!(one["result"]["replicates"], 200);
    assert_eq!(one["manifest"]["seeds"]["monte_carlo"], 9);
    assert_eq!(one["manifest"]["seeds"]["scenario"], 5);
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    generated(dir.path());
    assert_eq!(gldof(dir.path(), &["solve"]).status.code(), Some(2));
    assert_eq!(gldof(dir.path(), &["solve", "--problem", "missing.json"]).status.code(), Some(2));
    assert_eq!(
        gldof(dir.path(), &["solve", "--problem", "p.json", "--lambda", "-1"]).status.code(),
        Some(2)
    );
    let stalled = gldof(dir.path(), &["solve", "--problem", "p.json", "--max-iter", "2"]);
    assert_eq!(stalled.status.code(), Some(3));
    let partial: Value = serde_json::from_slice(&stalled.stdout).unwrap();
    assert_eq!(partial["converged"], false);
    assert_eq!(
        gldof(dir.path(), &["dof", "--problem", "p.json", "--max-iter", "2"]).status.code(),
        Some(3)
    );
    // mc without a seed anywhere
    assert_eq!(
        gldof(dir.path(), &["validate", "mc", "--q", "20", "--block-sizes", "2,2"]).status.code(),
        Some(2)
    );
}
