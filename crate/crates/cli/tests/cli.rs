use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const DESIGN: &str = "\
n_units = 600
periods = 12
rank = 1
signal = 0.5
noise = iid 1
assignment = independent 6 10 0.3
";

fn ssdid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssdid")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn run_json(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("run.json")).unwrap()).unwrap()
}

fn error_code(out: &Output) -> String {
    let body: Value = serde_json::from_slice(&out.stderr).expect("stderr is a JSON error");
    body["error"]["code"].as_str().unwrap().to_string()
}

/// Simulated panel and factors in a fresh directory.
fn simulated(design: &str) -> (TempDir, PathBuf) {
    let tmp = TempDir::new().unwrap();
    let spec = tmp.path().join("design.txt");
    fs::write(&spec, design).unwrap();
    let sim = tmp.path().join("sim");
    let out = ssdid(&["simulate", "--design-spec", path(&spec), "--seed", "4", "--output-dir", path(&sim)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (tmp, sim)
}

#[test]
fn simulate_writes_panel_factors_and_truths() {
    let (_tmp, sim) = simulated(DESIGN);
    for f in ["panel.csv", "factors.csv", "truths.csv", "run.json"] {
        assert!(sim.join(f).exists(), "{f} missing");
    }
    let panel = fs::read_to_string(sim.join("panel.csv")).unwrap();
    assert_eq!(panel.lines().count(), 1 + 600 * 12);
}

#[test]
fn estimate_writes_outputs_deterministically() {
    let (tmp, sim) = simulated(DESIGN);
    let input = sim.join("panel.csv");
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        let out = ssdid(&[
            "estimate", "--input", path(&input), "--output-dir", path(&dir), "--k-max", "2",
            "--bootstrap", "20", "--seed", "11",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        for f in ["estimates.csv", "horizon.csv", "run.json"] {
            assert!(dir.join(f).exists(), "{f} missing");
        }
        outputs.push((
            fs::read(dir.join("estimates.csv")).unwrap(),
            fs::read(dir.join("horizon.csv")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
    let horizon = String::from_utf8(outputs[0].1.clone()).unwrap();
    let mut lines = horizon.lines();
    assert_eq!(lines.next(), Some("k,tau_k,se,ci_lo,ci_hi"));
    assert_eq!(lines.count(), 3);
    let run = run_json(&tmp.path().join("a"));
    assert_eq!(run["estimator_kind"], "SSDID");
    assert_eq!(run["seed"], 11);
}

#[test]
fn eta_inf_is_recorded_as_plain_did() {
    let (tmp, sim) = simulated(DESIGN);
    let dir = tmp.path().join("est");
    let out = ssdid(&["estimate", "--input", path(&sim.join("panel.csv")), "--output-dir", path(&dir), "--eta", "inf"]);
    assert!(out.status.success());
    assert_eq!(run_json(&dir)["estimator_kind"], "SEQ_DID");
}

#[test]
fn missing_input_reports_not_found() {
    let tmp = TempDir::new().unwrap();
    let out = ssdid(&["estimate", "--input", path(&tmp.path().join("nope.csv")), "--output-dir", path(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_code(&out), "io.not_found");
}

#[test]
fn bootstrap_without_seed_is_a_usage_error() {
    let (tmp, sim) = simulated(DESIGN);
    let out = ssdid(&[
        "estimate", "--input", path(&sim.join("panel.csv")), "--output-dir", path(tmp.path()), "--bootstrap", "5",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_without_any_seed_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let spec = tmp.path().join("design.txt");
    fs::write(&spec, DESIGN).unwrap();
    let out = ssdid(&["simulate", "--design-spec", path(&spec), "--output-dir", path(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn placebo_reports_backdated_horizons() {
    let (tmp, sim) = simulated(DESIGN);
    let dir = tmp.path().join("placebo");
    let out = ssdid(&[
        "placebo", "--input", path(&sim.join("panel.csv")), "--output-dir", path(&dir), "--placebo-p", "2",
        "--bootstrap", "20", "--seed", "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.join("placebo.csv")).unwrap();
    let horizons: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(horizons, ["0", "1"]);
    assert!(run_json(&dir).get("pass").is_some());
}

#[test]
fn montecarlo_writes_tables() {
    let tmp = TempDir::new().unwrap();
    let spec = tmp.path().join("design.txt");
    fs::write(&spec, format!("{DESIGN}seed = 2\n")).unwrap();
    let dir = tmp.path().join("mc");
    let out = ssdid(&[
        "montecarlo", "--design-spec", path(&spec), "--output-dir", path(&dir), "--reps", "3", "--k-max", "1",
        "--bootstrap", "10", "--oracle",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rmse = fs::read_to_string(dir.join("rmse.csv")).unwrap();
    for name in ["SSDID", "SEQ_DID", "SEQ_OLS"] {
        assert!(rmse.lines().any(|l| l.starts_with(name)), "{name} missing");
    }
    assert!(!rmse.lines().any(|l| l.starts_with("SEQ_OLS,2")));
    let tstats = fs::read_to_string(dir.join("tstats.csv")).unwrap();
    assert_eq!(tstats.lines().count(), 1 + 3 * 2 * 2);
}

#[test]
fn oracle_check_on_simulated_factors() {
    let (tmp, sim) = simulated(DESIGN);
    let dir = tmp.path().join("oracle");
    let out = ssdid(&[
        "oracle-check", "--input", path(&sim.join("panel.csv")), "--factors", path(&sim.join("factors.csv")),
        "--output-dir", path(&dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.join("oracle.csv")).unwrap();
    assert!(csv.starts_with("a,k,series,sequential,joint,abs_diff"));
    assert_eq!(run_json(&dir)["equivalent"], true);
}

#[test]
fn oracle_check_rejects_identical_loadings() {
    let (tmp, sim) = simulated(DESIGN);
    let flat: String = fs::read_to_string(sim.join("factors.csv"))
        .unwrap()
        .lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split(',').collect();
            if f[0] == "theta" {
                f[2] = "1.0";
            }
            f.join(",") + "\n"
        })
        .collect();
    let factors = tmp.path().join("flat.csv");
    fs::write(&factors, flat).unwrap();
    let out = ssdid(&[
        "oracle-check", "--input", path(&sim.join("panel.csv")), "--factors", path(&factors),
        "--output-dir", path(&tmp.path().join("oracle")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_code(&out), "affine_hull.loadings_rank");
}

#[test]
fn oracle_check_without_factors() {
    let (tmp, sim) = simulated(DESIGN);
    let factors = tmp.path().join("none.csv");
    fs::write(&factors, "kind,index\n").unwrap();
    let out = ssdid(&[
        "oracle-check", "--input", path(&sim.join("panel.csv")), "--factors", path(&factors),
        "--output-dir", path(&tmp.path().join("oracle")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
