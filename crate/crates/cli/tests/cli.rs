use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn spillover(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spillover"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = spillover(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    spillover(dir, args).status.code().expect("exit code")
}

/// Header and rows of a CSV written by the CLI, skipping comment lines.
fn table(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}

fn digest_line(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn simulate_estimate_test_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["simulate", "--seed", "11", "--clusters", "60", "--out", "sim"]);
    let stdout = ok(d, &["estimate", "--input", "sim/data.csv", "--alpha", "0.5", "--gamma", "0.5,0;-0.5,0", "--out", "est"]);
    // 3 DE lines, 2 each of IE0, IE1, OE
    assert_eq!(stdout.lines().count(), 9);
    assert!(stdout.lines().next().unwrap().starts_with("DE gamma=(0.5,0)"));
    for f in ["estimates.csv", "covariance.csv", "effects.csv"] {
        assert!(digest_line(&d.join("est").join(f)).starts_with("# config_digest="), "{f}");
    }
    let (header, rows) = table(&d.join("est/effects.csv"));
    assert_eq!(rows.len(), 9);
    let de = column(&header, "estimate");
    for r in rows.iter().filter(|r| r[0] == "DE") {
        let v: f64 = r[de].parse().unwrap();
        assert!((v - 3.0).abs() < 0.5, "DE {v}");
    }
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("est/effects.json")).unwrap()).unwrap();
    assert_eq!(json["n_clusters"], 60);
    assert_eq!(json["mu"]["values"].as_array().unwrap().len(), 9);

    ok(d, &["test", "--input", "sim/data.csv", "--alpha", "0.5", "--grid-points", "3", "--seed", "5", "--B", "200", "--out", "t"]);
    let t: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("t/test.json")).unwrap()).unwrap();
    assert_eq!(t["effect"], "OE");
    assert_eq!(t["B"], 200);
    let p = t["p_value"].as_f64().unwrap();
    assert!(p > 0.0 && p <= 1.0);
    assert!(t["config_digest"].as_str().unwrap().len() == 64);
}

#[test]
fn same_seed_gives_identical_files_at_any_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for (run, threads) in [("a", "1"), ("b", "3")] {
        let w = d.join(run);
        fs::create_dir(&w).unwrap();
        ok(&w, &["simulate", "--scenario", "diffusion", "--seed", "2", "--clusters", "80", "--threads", threads, "--out", "sim"]);
        ok(&w, &["estimate", "--input", "sim/data.csv", "--alpha", "0.25", "--gamma", "0.5,0", "--boot-reps", "50", "--seed", "4", "--threads", threads, "--out", "est"]);
        ok(&w, &["test", "--input", "sim/data.csv", "--alpha", "0.25", "--gamma", "0.5,0;1,0", "--seed", "4", "--B", "300", "--threads", threads, "--out", "t"]);
    }
    for f in ["sim/data.csv", "sim/data.json", "est/estimates.csv", "est/effects.json", "est/bootstrap.json", "t/test.json"] {
        let a = fs::read(d.join("a").join(f)).unwrap();
        let b = fs::read(d.join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    let sim_a = digest_line(&d.join("a/sim/data.csv"));
    ok(d, &["simulate", "--scenario", "diffusion", "--seed", "3", "--clusters", "80", "--out", "c"]);
    assert_ne!(sim_a, digest_line(&d.join("c/data.csv")));
}

#[test]
fn one_cluster_gives_unweighted_means() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let y = [1.5, -2.0, 4.0, 0.25, 3.0, 7.0];
    let a = [1, 0, 1, 0, 0, 1];
    let x = [0.0, 1.0, 1.0, 0.0, 2.0, -1.0];
    let mut csv = String::from("cluster,treatment,outcome,x\n");
    for j in 0..6 {
        csv.push_str(&format!("k,{},{},{}\n", a[j], y[j], x[j]));
    }
    fs::write(d.join("one.csv"), csv).unwrap();
    let out = spillover(d, &["estimate", "--input", "one.csv", "--alpha", "0.5", "--design-p", "0.5", "--gamma", "0.7", "--out", "o"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("one cluster"));

    let mean = |f: &dyn Fn(usize) -> bool| {
        let v: Vec<f64> = (0..6).filter(|&j| f(j)).map(|j| y[j]).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (header, rows) = table(&d.join("o/estimates.csv"));
    let (e, g, est) = (column(&header, "estimand"), column(&header, "gamma_1"), column(&header, "estimate"));
    let get = |name: &str, gamma: &str| -> f64 {
        rows.iter().find(|r| r[e] == name && r[g] == gamma).unwrap()[est].parse().unwrap()
    };
    // With a single cluster the cluster weight cancels in the overall ratio.
    for gamma in ["0.7", "0"] {
        assert!((get("mu", gamma) - mean(&|_| true)).abs() < 1e-12);
    }
    // At gamma = 0 and alpha equal to the design probability every weight is one.
    assert!((get("mu0", "0") - mean(&|j| a[j] == 0)).abs() < 1e-12);
    assert!((get("mu1", "0") - mean(&|j| a[j] == 1)).abs() < 1e-12);
    assert!(!d.join("o/covariance.csv").exists());
}

#[test]
fn oracle_without_diffusion_has_no_overall_effect() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["oracle", "--scenario", "2", "--pd", "0", "--alpha", "0.25", "--seed", "9", "--reps", "300", "--out", "mc"]);
    ok(d, &["oracle", "--scenario", "2", "--pd", "0", "--alpha", "0.25", "--method", "exact", "--gamma", "-0.5,0;0.5,0", "--out", "ex"]);
    let (h, rows) = table(&d.join("mc/oracle.csv"));
    assert_eq!(rows.len(), 5);
    let (oe, se) = (column(&h, "oe"), column(&h, "se_oe"));
    for r in &rows {
        let v: f64 = r[oe].parse().unwrap();
        let s: f64 = r[se].parse().unwrap();
        assert!(v.abs() <= 3.0 * s + 1e-12, "OE {v} se {s}");
    }
    let (h, rows) = table(&d.join("ex/oracle.csv"));
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0][column(&h, "method")], "exact");
    for r in &rows {
        let v: f64 = r[column(&h, "oe")].parse().unwrap();
        assert!(v.abs() <= 1e-12);
        let ie1: f64 = r[column(&h, "ie1")].parse().unwrap();
        assert!(ie1.abs() <= 1e-12);
    }
}

#[test]
fn gamma_grid_prints_ranges() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["simulate", "--seed", "1", "--clusters", "50", "--out", "sim"]);
    let stdout = ok(d, &["gamma-grid", "--input", "sim/data.csv", "--out", "g"]);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "covariate,lo,hi,n_converged,n_dropped");
    assert_eq!(lines.len(), 3);
    for l in &lines[1..] {
        let f: Vec<&str> = l.split(',').collect();
        let (lo, hi): (f64, f64) = (f[1].parse().unwrap(), f[2].parse().unwrap());
        let (conv, drop): (usize, usize) = (f[3].parse().unwrap(), f[4].parse().unwrap());
        assert!(lo < hi);
        assert_eq!(conv + drop, 50);
    }
    let file = fs::read_to_string(d.join("g/gamma_grid.csv")).unwrap();
    assert!(file.starts_with("# config_digest="));
    assert!(file.ends_with(&stdout));
}

#[test]
fn errors_map_to_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["simulate", "--seed", "1", "--clusters", "20", "--out", "sim"]);
    let est = ["estimate", "--input", "sim/data.csv", "--alpha", "0.5"];

    assert_eq!(code(d, &["estimate", "--bogus-flag"]), 2);

    fs::write(d.join("typo.json"), r#"{"alpah": 0.5}"#).unwrap();
    assert_eq!(code(d, &[&est[..], &["--config", "typo.json"]].concat()), 3);
    fs::write(d.join("other.json"), r#"{"command": "oracle"}"#).unwrap();
    assert_eq!(code(d, &[&est[..], &["--config", "other.json"]].concat()), 3);
    assert_eq!(code(d, &["simulate", "--out", "x"]), 3, "missing seed");
    assert_eq!(code(d, &["test", "--input", "sim/data.csv", "--alpha", "0.5"]), 3, "missing seed");
    assert_eq!(code(d, &[&est[..], &["--boot-reps", "10"]].concat()), 3, "bootstrap needs a seed");
    assert_eq!(code(d, &[&est[..], &["--gamma", "1,2,3"]].concat()), 3);

    assert_eq!(code(d, &["estimate", "--input", "missing.csv", "--alpha", "0.5", "--design-p", "0.5"]), 4);

    fs::write(d.join("bad.csv"), "cluster,treatment,outcome,x\na,2,1.0,0\na,0,1.0,1\n").unwrap();
    assert_eq!(code(d, &["estimate", "--input", "bad.csv", "--alpha", "0.5", "--design-p", "0.5"]), 5);

    fs::write(d.join("treated.csv"), "cluster,treatment,outcome,x\na,1,1.0,0\na,1,2.0,1\nb,1,0.5,0\nb,1,1.0,1\n").unwrap();
    assert_eq!(code(d, &["estimate", "--input", "treated.csv", "--alpha", "0.5", "--design-p", "0.5", "--gamma", "0"]), 6);
}

#[test]
fn config_file_drives_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(
        d.join("sim.json"),
        r#"{"command": "simulate", "seed": 8, "out": "s",
            "scenario": {"scenario": "linear", "clusters": 30, "cluster_size": 6, "beta": {"b0": 0.1}}}"#,
    )
    .unwrap();
    ok(d, &["simulate", "--config", "sim.json"]);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("s/data.json")).unwrap()).unwrap();
    assert_eq!(meta["n_units"], 180);
    assert_eq!(meta["scenario"]["beta"]["b0"], 0.1);

    fs::write(
        d.join("est.json"),
        r#"{"input": "s/data.csv", "alpha": 0.4, "level": 0.9,
            "gamma": {"auto": {"covariates": ["x1"], "points": 3}},
            "design": {"kind": "constant-bernoulli", "p": 0.5}}"#,
    )
    .unwrap();
    ok(d, &["estimate", "--config", "est.json", "--out", "e"]);
    let (h, rows) = table(&d.join("e/effects.csv"));
    let level = column(&h, "level");
    assert!(rows.iter().all(|r| r[level] == "0.9"));
    // x2 is held at zero in an x1-only grid
    assert!(rows.iter().all(|r| r[column(&h, "gamma_2")] == "0"));
}
