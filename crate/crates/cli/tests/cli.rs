use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_delta-opf")).args(args).env_remove("DELTA_OPF_SOLVER_TOL").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn exact_solve_exits_zero_and_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.json");
    let o = run(&["solve", "--feeder", "two_bus_delta", "--algorithm", "penalty", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    for col in ["W-ratio", "M-ratios", "Infeas. (kW)", "Cost"] {
        assert!(text.contains(col), "{text}");
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(report["status"], "exact");
    assert_eq!(report["lambda"], 10.0);
}

#[test]
fn vlimit_sets_the_band() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let o = run(&["solve", "--feeder", "three_bus_delta", "--model", "bfm", "--vlimit", "3", "--out", out.to_str().unwrap()]);
    assert!(matches!(o.status.code(), Some(0 | 2)));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert!((report["v_min"].as_f64().unwrap() - 0.97).abs() < 1e-12);
    assert!((report["v_max"].as_f64().unwrap() - 1.03).abs() < 1e-12);
}

#[test]
fn failed_rank_check_exits_two() {
    let o = run(&["solve", "--feeder", "ieee13", "--vlimit", "3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("failed"));
}

#[test]
fn bad_flags_exit_one() {
    for args in [
        &["solve", "--feeder", "two_bus_delta", "--lambda", "-1"][..],
        &["solve", "--feeder", "two_bus_delta", "--model", "dense"],
        &["solve", "--feeder", "no_such_feeder"],
        &["solve", "--feeder", "two_bus_delta", "--lambda", "1"],
        &["solve", "--feeder", "two_bus_delta", "--vlimit", "0"],
        &["sweep", "--feeder", "two_bus_delta", "--lambdas", "0,-2"],
        &["equiv", "--feeder", "two_bus_delta", "--lambda", "nan"],
        &["solve"],
        &["frobnicate"],
    ] {
        assert_eq!(run(args).status.code(), Some(1), "{args:?}");
    }
}

#[test]
fn solver_tolerance_comes_from_the_environment() {
    let bin = env!("CARGO_BIN_EXE_delta-opf");
    let bad = Command::new(bin).args(["solve", "--feeder", "two_bus_delta"]).env("DELTA_OPF_SOLVER_TOL", "x").output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    let ok = Command::new(bin).args(["solve", "--feeder", "no_delta"]).env("DELTA_OPF_SOLVER_TOL", "1e-7").output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
}

#[test]
fn sweep_writes_one_csv_row_per_lambda_and_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    let o = run(&["sweep", "--feeder", "two_bus_delta", "--model", "bim", "--model", "bfm", "--lambdas", "10,0,1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mut r = csv::Reader::from_path(&out).unwrap();
    let headers: Vec<String> = r.headers().unwrap().iter().map(str::to_owned).collect();
    assert_eq!(headers, ["feeder", "model", "algorithm", "lambda", "W-ratio", "M-ratios", "Infeas. (kW)", "Cost", "status", "seconds"]);
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 6);
    let lambdas: Vec<f64> = rows.iter().take(3).map(|r| r[3].parse().unwrap()).collect();
    assert_eq!(lambdas, [0.0, 1.0, 10.0]);
    let text = stdout(&o);
    assert!(text.contains("bim: cost nondecreasing: true"), "{text}");
    assert!(text.contains("relative objective spread"), "{text}");
}

#[test]
fn single_lambda_sweep_is_one_row() {
    let o = run(&["sweep", "--feeder", "no_delta", "--lambdas", "10"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("no_delta")).count(), 1);
}

#[test]
fn equivalence_on_a_single_bus_has_no_gap() {
    let o = run(&["equiv", "--feeder", "single_bus"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let json_end = text.rfind('}').unwrap();
    let rep: serde_json::Value = serde_json::from_str(&text[..=json_end]).unwrap();
    assert_eq!(rep["abs_gap"], 0.0);
    assert!(text.contains("equivalence holds"));
}
