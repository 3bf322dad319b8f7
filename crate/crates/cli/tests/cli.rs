use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn seqjde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqjde"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.display().to_string()
}

const SMALL: &str = r#"
scenario = "shift_in_mean"
seed = 5

[design]
tol_det = 0.5
tol_est = 0.5
runs_per_iter = 3000
max_iters = 3

[simulation]
runs = 3000
"#;

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn invalid_level_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "[levels]\nalpha_bar = [1.5, 0.05, 0.05]\n");
    let out = seqjde(&["design", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("alpha_bar must lie in (0,1)"), "{}", stderr(&out));
}

#[test]
fn zero_runs_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let out_dir = dir.path().join("out");
    let out = seqjde(&[
        "evaluate", "--config", &cfg, "--policy", "two_step", "--runs", "0", "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("simulation.runs"));
}

#[test]
fn ao_needs_coefficients() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let out = seqjde(&["evaluate", "--config", &cfg, "--policy", "ao", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--coeffs"));
}

#[test]
fn design_evaluate_and_map_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");

    let out = seqjde(&["design", "--config", &cfg, "--out", a.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let out = seqjde(&["design", "--config", &cfg, "--out", b.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let coeffs_a = fs::read(a.join("coefficients.toml")).unwrap();
    assert_eq!(coeffs_a, fs::read(b.join("coefficients.toml")).unwrap());
    assert_eq!(
        fs::read(a.join("design_log.csv")).unwrap(),
        fs::read(b.join("design_log.csv")).unwrap()
    );

    // a different seed changes the provenance
    let c = dir.path().join("c");
    let out = seqjde(&["design", "--config", &cfg, "--seed", "6", "--out", c.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_ne!(coeffs_a, fs::read(c.join("coefficients.toml")).unwrap());

    let coeffs = a.join("coefficients.toml");
    let out = seqjde(&[
        "compare", "--config", &cfg, "--coeffs", coeffs.to_str().unwrap(), "--out", a.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let errors = fs::read_to_string(a.join("compare_errors.csv")).unwrap();
    let mut lines = errors.lines();
    assert!(lines.next().unwrap().starts_with("# seqjde "));
    assert_eq!(
        lines.next().unwrap(),
        "policy,hypothesis,nominal_alpha,alpha_hat,alpha_se,nominal_beta,beta_hat,beta_se"
    );
    assert_eq!(lines.filter(|l| l.starts_with("ao,")).count(), 3);
    let rl = fs::read_to_string(a.join("compare_run_lengths.csv")).unwrap();
    assert!(rl.lines().any(|l| l.starts_with("two_step,all,")));

    let out = seqjde(&[
        "policy-map", "--config", &cfg, "--coeffs", coeffs.to_str().unwrap(), "--out", a.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let map = fs::read_to_string(a.join("policy_map.csv")).unwrap();
    assert_eq!(map.lines().count(), 2 + 61 * 601);
    assert!(map.lines().nth(1).unwrap() == "n,xbar,action");
}

#[test]
fn policy_map_rejects_qam() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "q.toml", "scenario = \"qam\"\n");
    let coeffs = dir.path().join("coefficients.toml");
    let lam = vec!["1.0"; 16].join(", ");
    fs::write(
        &coeffs,
        format!(
            "version = \"0\"\nscenario = \"qam\"\nconfig_sha256 = \"\"\nseed = 0\niterations = 0\nconverged = false\n\
             lambda_det = [{lam}]\nlambda_est = [{lam}]\nalpha_hat = []\nbeta_hat = []\n"
        ),
    )
    .unwrap();
    let out = seqjde(&["policy-map", "--config", &cfg, "--coeffs", coeffs.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn diagnostics_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "q.toml", "scenario = \"qam\"\n");
    let out = seqjde(&["diagnostics", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("KL(row || column)"));
    assert!(text.contains("H16"));
}
