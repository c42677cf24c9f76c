use std::path::Path;
use std::process::{Command, Output};

fn rwre(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rwre"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("RWRE_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).trim().to_string()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn exact_sojourn_of_unit_ball() {
    let dir = tempfile::tempdir().unwrap();
    let o = rwre(
        &[
            "exact", "sojourn", "--d", "3", "--L", "1", "--family", "zero",
        ],
        dir.path(),
    );
    assert!(o.status.success());
    assert_eq!(stdout(&o), "2.4");
    assert!(dir.path().join("manifest.json").exists());
    assert!(dir.path().join("manifest.toml").exists());
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = rwre(&["exact", "sojourn", "--frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = rwre(
        &["exact", "sojourn", "--d", "3", "--eps", "0.17"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    let o = rwre(&["teleport", "run"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn budget_exhaustion_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = rwre(
        &[
            "scales", "run", "--ladder", "8,12", "--envs", "4", "--budget", "1",
        ],
        dir.path(),
    );
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn env_sample_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = [
        "env", "sample", "--seed", "42", "--eps", "0.05", "--window", "3",
    ];
    assert!(rwre(&args, a.path()).status.success());
    assert!(rwre(&args, b.path()).status.success());
    let fa = std::fs::read(a.path().join("env_window.csv")).unwrap();
    let fb = std::fs::read(b.path().join("env_window.csv")).unwrap();
    assert!(!fa.is_empty());
    assert_eq!(fa, fb);
    let c = tempfile::tempdir().unwrap();
    let args = [
        "env", "sample", "--seed", "43", "--eps", "0.05", "--window", "3",
    ];
    assert!(rwre(&args, c.path()).status.success());
    assert_ne!(fa, std::fs::read(c.path().join("env_window.csv")).unwrap());
}

#[test]
fn config_file_defaults_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "").unwrap();
    let o = rwre(
        &[
            "--config",
            cfg.to_str().unwrap(),
            "exact",
            "sojourn",
            "--L",
            "1",
        ],
        dir.path(),
    );
    assert!(o.status.success());
    let m = json(&dir.path().join("manifest.json"));
    assert_eq!(m["config"]["d"], 3);
    assert_eq!(m["config"]["seed"], 1);
    assert_eq!(m["command"], "exact sojourn");

    std::fs::write(&cfg, "epsilon = 0.05\nradius = 2.0\nseed = 7\n").unwrap();
    let o = rwre(
        &[
            "--config",
            cfg.to_str().unwrap(),
            "exact",
            "sojourn",
            "--eps",
            "0.01",
        ],
        dir.path(),
    );
    assert!(o.status.success());
    let m = json(&dir.path().join("manifest.json"));
    assert_eq!(m["config"]["epsilon"], 0.01);
    assert_eq!(m["config"]["radius"], 2.0);
    assert_eq!(m["config"]["seed"], 7);

    std::fs::write(&cfg, "radiuss = 2.0\n").unwrap();
    let o = rwre(
        &["--config", cfg.to_str().unwrap(), "exact", "sojourn"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("radiuss"));
}

#[test]
fn seed_falls_back_to_environment_variable() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_rwre"))
        .args(["exact", "sojourn", "--L", "1", "--out"])
        .arg(dir.path())
        .env("RWRE_SEED", "99")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(
        json(&dir.path().join("manifest.json"))["config"]["seed"],
        99
    );
    let o = Command::new(env!("CARGO_BIN_EXE_rwre"))
        .args(["exact", "sojourn", "--L", "1", "--seed", "5", "--out"])
        .arg(dir.path())
        .env("RWRE_SEED", "99")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(json(&dir.path().join("manifest.json"))["config"]["seed"], 5);
}

#[test]
fn manifest_reproduces_run() {
    let a = tempfile::tempdir().unwrap();
    let o = rwre(
        &[
            "walk", "sojourn", "--eps", "0.03", "--seed", "11", "--L", "5", "--reps", "300",
        ],
        a.path(),
    );
    assert!(o.status.success());
    let first = json(&a.path().join("walk_sojourn.json"));
    let b = tempfile::tempdir().unwrap();
    let manifest = a.path().join("manifest.toml");
    let o = rwre(
        &["--config", manifest.to_str().unwrap(), "walk", "sojourn"],
        b.path(),
    );
    assert!(o.status.success());
    let second = json(&b.path().join("walk_sojourn.json"));
    for key in ["mean", "stderr", "second_moment"] {
        let (x, y) = (first[key].as_f64().unwrap(), second[key].as_f64().unwrap());
        assert!(
            (x - y).abs() <= 1e-9 * x.abs().max(1.0),
            "{key}: {x} vs {y}"
        );
    }
}

#[test]
fn srw_ladder_reports_unit_diffusion() {
    let dir = tempfile::tempdir().unwrap();
    let o = rwre(
        &[
            "scales", "run", "--ladder", "8,12,16", "--eps", "0", "--envs", "10",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let diag = json(&dir.path().join("diagnostics.json"));
    assert_eq!(diag["rungs"].as_array().unwrap().len(), 3);
    let d = diag["diffusion"]["d"].as_f64().unwrap();
    assert!((d - 1.0).abs() < 0.05, "{}", stdout(&o));
    assert!(dir.path().join("ladder.csv").exists());
}

#[test]
fn clt_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = rwre(
        &[
            "clt", "run", "--n", "120000", "--reps", "20", "--eps", "0.02",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = json(&dir.path().join("clt_run.json"));
    assert_eq!(run["n"], 120000);
    assert!(run["L_n"].as_f64().unwrap() >= 16.0);
    assert_eq!(run["covariance"].as_array().unwrap().len(), 3);
    let csv = std::fs::read_to_string(dir.path().join("endpoints.csv")).unwrap();
    assert_eq!(csv.lines().count(), 21);
    let o = rwre(&["clt", "run", "--n", "1000", "--reps", "2"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}
