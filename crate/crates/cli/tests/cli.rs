use std::path::Path;
use std::process::{Command, Output};

use tvcomb::simulation::{simulate_lowdim, DgpConfig};

fn tvcomb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tvcomb"))
        .args(args)
        .env_remove("TVC_THREADS")
        .output()
        .unwrap()
}

/// Writes a simulated two-forecast panel with `n` rows.
fn write_panel(dir: &Path, n: usize) -> String {
    let sim = simulate_lowdim(&DgpConfig::lowdim(n - 1, 1, 5)).unwrap();
    let p = &sim.panel;
    let mut text = String::from("date,y,f1,f2\n");
    for t in 1..=n {
        let f = p.f(t);
        text.push_str(&format!("{t},{},{},{}\n", p.y(t), f[0], f[1]));
    }
    let path = dir.join("data.csv");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn estimate_writes_one_row_per_pair() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_panel(dir.path(), 61);
    let out = tvcomb(&["estimate", "--input", &input, "--cv", "0.5,3,6", "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let weights = std::fs::read_to_string(dir.path().join("weights.csv")).unwrap();
    let mut lines = weights.lines();
    let header = lines.next().unwrap();
    assert_eq!(header.split(',').count(), 1 + 2 * 3);
    let rows: Vec<&str> = lines.collect();
    assert!(!rows.is_empty() && rows.len() <= 60);
    assert!(rows.iter().all(|r| r.split(',').count() == 7));
    let cv = std::fs::read_to_string(dir.path().join("cv_curve.csv")).unwrap();
    assert_eq!(cv.lines().count(), 1 + 6);
    let report = read_json(&dir.path().join("estimate.json"));
    assert!(report["h"].as_f64().unwrap() > 0.0);
}

#[test]
fn forecast_prints_a_number() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_panel(dir.path(), 61);
    let out = tvcomb(&["forecast", "--input", &input, "--bandwidth", "0.4", "--out", s(dir.path())]);
    assert!(out.status.success());
    let printed: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!(printed.is_finite());
    assert!(dir.path().join("forecast.json").exists());
}

#[test]
fn missing_input_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = tvcomb(&["estimate", "--input", s(&missing), "--bandwidth", "0.4", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(err["kind"], "io");
    assert!(err["message"].is_string());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(tvcomb(&["estimate", "--bogus"]).status.code(), Some(2));
    assert_eq!(
        tvcomb(&["estimate", "--input", "x.csv", "--bandwidth", "0.3", "--cv", "0.5,3,5"]).status.code(),
        Some(2)
    );
    assert_eq!(tvcomb(&["cv", "--input", "x.csv", "--cv", "0.5,3"]).status.code(), Some(2));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_panel(dir.path(), 61);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, format!(r#"{{"input": "{input}", "bandwidth": 0.3, "out": "{}"}}"#, s(dir.path()))).unwrap();
    let run = |extra: &[&str]| {
        let mut args = vec!["forecast", "--config", s(&cfg)];
        args.extend_from_slice(extra);
        let out = tvcomb(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8_lossy(&out.stdout).trim().to_string()
    };
    let from_file = run(&[]);
    let explicit = run(&["--bandwidth", "0.3"]);
    let overridden = run(&["--bandwidth", "0.6"]);
    assert_eq!(from_file, explicit);
    assert_ne!(from_file, overridden);

    std::fs::write(&cfg, r#"{"no-such-key": 1}"#).unwrap();
    assert_eq!(tvcomb(&["forecast", "--config", s(&cfg)]).status.code(), Some(2));
}

#[test]
fn simulate_smoke_writes_table_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = tvcomb(&["simulate", "--design", "table1", "--smoke", "--seed", "3", "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(dir.path().join("table1.csv")).unwrap();
    assert!(table.lines().any(|l| l.starts_with("NPRf,")));
    let manifest = read_json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["seed"], 3);
}

fn write_oos(dir: &Path) -> String {
    let mut text = String::from("t,actual,A,B,C\n");
    for i in 0..40 {
        let x = i as f64;
        let actual = (0.7 * x).sin();
        let a = actual + 0.1 * (1.3 * x).cos();
        let b = actual + 0.8 * (2.1 * x).sin();
        text.push_str(&format!("{i},{actual},{a},{b},{a}\n"));
    }
    let path = dir.join("oos.csv");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn evaluate(dir: &Path, extra: &[&str]) -> serde_json::Value {
    let input = write_oos(dir);
    let mut args = vec!["evaluate", "--input", &input, "--out", s(dir)];
    args.extend_from_slice(extra);
    let out = tvcomb(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    read_json(&dir.join("tests.json"))
}

#[test]
fn evaluate_dm_results() {
    let dir = tempfile::tempdir().unwrap();
    let res = evaluate(dir.path(), &["--compare", "A<C", "--compare", "A<B", "--compare", "B<A"]);
    let p = |i: usize| res["dm"][i]["result"]["p_value"].as_f64().unwrap();
    assert_eq!(p(0), 0.5);
    assert!((p(1) + p(2) - 1.0).abs() < 1e-12);
    assert!(p(1) < 0.05);
    let ascfe = std::fs::read_to_string(dir.path().join("ascfe.csv")).unwrap();
    assert_eq!(ascfe.lines().count(), 4);
}

#[test]
fn evaluate_rc_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["--benchmark", "B", "--reps", "200", "--seed", "11"];
    let ra = evaluate(a.path(), &args);
    let rb = evaluate(b.path(), &args);
    assert_eq!(ra["rc"], rb["rc"]);
    assert!(ra["rc"]["result"]["p_value"].as_f64().unwrap() < 0.1);
}

#[test]
fn malformed_comparison_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_oos(dir.path());
    let out = tvcomb(&["evaluate", "--input", &input, "--compare", "A=B", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn two_stage_writes_paths_and_bic_curve() {
    let dir = tempfile::tempdir().unwrap();
    let sim = tvcomb::simulation::simulate_highdim(&DgpConfig::highdim(80, 4, 1, 2)).unwrap();
    let p = &sim.panel;
    let mut text = String::from("y,f1,f2,f3,f4,f5,f6\n");
    for t in 1..=p.n_obs() + 1 {
        let f: Vec<String> = p.f(t.min(p.n_obs())).iter().map(|v| v.to_string()).collect();
        text.push_str(&format!("{},{}\n", p.y(t), f.join(",")));
    }
    let input = dir.path().join("hd.csv");
    std::fs::write(&input, text).unwrap();
    let out = tvcomb(&["two-stage", "--input", s(&input), "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let bic = std::fs::read_to_string(dir.path().join("bic_curve.csv")).unwrap();
    assert_eq!(bic.lines().count(), 1 + 20);
    let paths = std::fs::read_to_string(dir.path().join("staged_paths.csv")).unwrap();
    assert_eq!(paths.lines().next().unwrap().split(',').count(), 1 + 3 * 7);
    let summary = read_json(&dir.path().join("two_stage_summary.json"));
    assert!(summary.is_object());
}
