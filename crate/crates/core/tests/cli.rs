use hardness_lab::objective::GridSpec;
use serde_json::{json, Value};
use std::fs;
use std::path::Path;
use std::process::Command;

fn lab(out: &Path, args: &[&str], config: Option<Value>) -> i32 {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lab"));
    cmd.args(args).arg("--out").arg(out);
    if let Some(cfg) = config {
        let path = out.with_extension("json");
        fs::write(&path, cfg.to_string()).unwrap();
        cmd.arg("--config").arg(path);
    }
    cmd.output().unwrap().status.code().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn closed_objective(w: [f64; 2], ws: [f64; 2]) -> f64 {
    let q = |a: f64, b: f64| a * a + b * b;
    let e = |k: f64, v: f64| (-k * std::f64::consts::PI.powi(2) * v).exp();
    1.0 + 0.5 * e(8.0, q(w[0], w[1])) + 0.5 * e(8.0, q(ws[0], ws[1]))
        - e(2.0, q(w[0] - ws[0], w[1] - ws[1]))
        - e(2.0, q(w[0] + ws[0], w[1] + ws[1]))
}

#[test]
fn landscape_default_finds_both_minima_and_the_maximum() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("land");
    assert_eq!(lab(&out, &["landscape", "--seed", "1"], None), 0);
    let s = read_json(&out.join("summary.json"));
    let mut minima: Vec<(f64, f64)> = s["minima"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| (m["w1"].as_f64().unwrap(), m["w2"].as_f64().unwrap()))
        .collect();
    minima.sort_by(|a, b| a.0.total_cmp(&b.0));
    assert_eq!(minima.len(), 2);
    for ((w1, w2), sign) in minima.iter().zip([-1.0, 1.0]) {
        assert!((w1 - 2.0 * sign).abs() < 1e-9 && (w2 - 2.0 * sign).abs() < 1e-9);
    }
    assert!(s["maximum"]["w1"].as_f64().unwrap().abs() < 1e-9);
    assert!(s["maximum"]["w2"].as_f64().unwrap().abs() < 1e-9);
    let csv = fs::read_to_string(out.join("landscape.csv")).unwrap();
    assert_eq!(csv.lines().count(), 201 * 201 + 1);
    assert!(fs::read_to_string(out.join("landscape.svg")).unwrap().starts_with("<svg"));
    assert_eq!(read_json(&out.join("config.json"))["seed"], 1);
}

#[test]
fn landscape_away_from_the_targets_stays_high() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("land");
    let cfg = json!({"grid": {"lo": [-1.0, -1.0], "hi": [1.0, 1.0], "n": [41, 41]}});
    assert_eq!(lab(&out, &["landscape", "--seed", "2"], Some(cfg)), 0);
    let s = read_json(&out.join("summary.json"));
    assert!(s["min_value"].as_f64().unwrap() >= 0.5);
    // Spot-check the CSV against an independent evaluation.
    let csv = fs::read_to_string(out.join("landscape.csv")).unwrap();
    for line in csv.lines().skip(1).step_by(97) {
        let v: Vec<f64> = line.split(',').map(|t| t.parse().unwrap()).collect();
        assert!((v[2] - closed_objective([v[0], v[1]], [2.0, 2.0])).abs() <= 1e-12);
    }
}

#[test]
fn landscape_cell_at_the_target_is_a_perfect_fit() {
    let grid = GridSpec::square(-3.0, 3.0, 201);
    let ws = [grid.coord(0, 130), grid.coord(1, 47)];
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("land");
    assert_eq!(lab(&out, &["landscape", "--seed", "3"], Some(json!({"wstar": ws}))), 0);
    let s = read_json(&out.join("summary.json"));
    assert!(s["min_value"].as_f64().unwrap() <= 1e-12);
}

#[test]
fn variance_default_scan_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("var");
    assert_eq!(lab(&out, &["variance-scan", "--seed", "4", "--strict"], None), 0);
    let fits = read_json(&out.join("fits.json"));
    assert_eq!(fits["monotone"], true);
    let csv = fs::read_to_string(out.join("variance.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "d,r,variance,mc_floor,bound_series,exp_term");
    assert_eq!(csv.lines().count(), 3 * 6 + 1);
}

#[test]
fn single_cell_scan_has_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("var");
    let cfg = json!({"dims": [6], "radii": [1.0]});
    assert_eq!(lab(&out, &["variance-scan", "--seed", "5"], Some(cfg)), 0);
    let csv = fs::read_to_string(out.join("variance.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("6,1,"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({"dims": [4, 8], "radii": [0.5, 1.5], "method": "monte_carlo", "n_x": 4000, "n_wstar": 20});
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(lab(&a, &["variance-scan", "--seed", "6", "--workers", "1"], Some(cfg.clone())), 0);
    assert_eq!(lab(&b, &["variance-scan", "--seed", "6", "--workers", "4"], Some(cfg)), 0);
    for f in ["variance.csv", "fits.json", "config.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn trajectory_oracle_runs_are_target_free() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("traj");
    let cfg = json!({"n_targets": 4, "trainer": {"iters": 200}});
    assert_eq!(lab(&out, &["trajectory", "--seed", "7", "--strict"], Some(cfg)), 0);
    let rep = read_json(&out.join("report.json"));
    assert_eq!(rep["identical_pairs"], 6);
    assert_eq!(rep["true_branch_flags"], 0);
    assert_eq!(rep["radius"], 8.0);
    let a = fs::read(out.join("trajectory_00.jsonl")).unwrap();
    let b = fs::read(out.join("trajectory_03.jsonl")).unwrap();
    assert_eq!(a, b);
    let first: Value = serde_json::from_str(std::str::from_utf8(&a).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["t"], 1);
    assert_eq!(first["branch"], "mean");
    assert_eq!(first["w"].as_array().unwrap().len(), 30);
}

#[test]
fn trajectory_honest_small_radius_splits_early() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("traj");
    let cfg = json!({"dim": 3, "r": 0.25, "trainer": {"iters": 10},
                     "feedback": {"kind": "honest", "gradient": {"kind": "closed_form"}}});
    assert_eq!(lab(&out, &["trajectory", "--seed", "8"], Some(cfg)), 0);
    let rep = read_json(&out.join("report.json"));
    assert_eq!(rep["identical_pairs"], 0);
    for d in rep["divergences"].as_array().unwrap() {
        assert!(d["iteration"].as_u64().unwrap() <= 10);
    }
}

#[test]
fn trajectory_with_zero_steps_is_trivially_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("traj");
    let cfg = json!({"dim": 3, "r": 0.25, "n_targets": 3, "trainer": {"iters": 0},
                     "feedback": {"kind": "honest", "gradient": {"kind": "closed_form"}}});
    assert_eq!(lab(&out, &["trajectory", "--seed", "9"], Some(cfg)), 0);
    assert_eq!(read_json(&out.join("report.json"))["identical_pairs"], 3);
}

#[test]
fn invariance_default_passes_under_strict() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("inv");
    assert_eq!(lab(&out, &["invariance", "--seed", "10", "--strict"], None), 0);
    let v = read_json(&out.join("verdicts.json"));
    assert_eq!(v["pass"], true);
    assert_eq!(v["verdicts"].as_array().unwrap().len(), 3);
    assert_eq!(v["control"]["detected"], true);
    for s in v["span"].as_array().unwrap() {
        assert!(s["mean"].as_f64().unwrap() <= s["bound"].as_f64().unwrap());
    }
}

#[test]
fn invariance_reads_csv_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let mut text = String::from("x1,x2,x3,y\n");
    for k in 0..12 {
        let t = k as f64;
        text.push_str(&format!("{},{},{},{}\n", t.sin(), (2.0 * t).cos(), t / 7.0, (t * 0.3).tanh()));
    }
    fs::write(&data, text).unwrap();
    let out = dir.path().join("inv");
    let cfg = json!({"dataset": {"kind": "csv", "path": data}, "trials": 4, "span": null});
    assert_eq!(lab(&out, &["invariance", "--seed", "11", "--strict"], Some(cfg)), 0);
    assert_eq!(read_json(&out.join("verdicts.json"))["pass"], true);
}

#[test]
fn reduction_check_small_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("red");
    let cfg = json!({"instances": 10, "max_dim": 8, "padding_points": 200, "rounding_pairs": 1000});
    assert_eq!(lab(&out, &["reduction-check", "--seed", "12", "--strict"], Some(cfg)), 0);
    let rep = read_json(&out.join("report.json"));
    assert_eq!(rep["total_mismatches"], 0);
    assert_eq!(rep["pass"], true);
    let instances = read_json(&out.join("instances.json"));
    assert_eq!(instances.as_array().unwrap().len(), 10);
}

#[test]
fn reduction_check_replays_an_instance_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("inst.json");
    fs::write(&file, json!([{"weights": [[1, 1, -1]], "thresholds": [1]}, {"weights": [[2, 0], [0, 2]], "thresholds": [1, 1]}]).to_string()).unwrap();
    let out = dir.path().join("red");
    let cfg = json!({"instances_file": file, "padding_points": 50, "rounding_pairs": 100});
    assert_eq!(lab(&out, &["reduction-check", "--seed", "13"], Some(cfg)), 0);
    let rep = read_json(&out.join("report.json"));
    let points: Vec<u64> = rep["instances"].as_array().unwrap().iter().map(|i| i["points"].as_u64().unwrap()).collect();
    assert_eq!(points, vec![8, 4]);
}

#[test]
fn missing_seed_and_bad_config_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(lab(&dir.path().join("a"), &["landscape"], None), 1);
    assert_eq!(lab(&dir.path().join("b"), &["landscape", "--seed", "1"], Some(json!({"wstar": [1.0, 2.0, 3.0]}))), 1);
    assert_eq!(lab(&dir.path().join("c"), &["variance-scan", "--seed", "1"], Some(json!({"no_such_key": 1}))), 1);
}
