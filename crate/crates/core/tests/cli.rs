use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stackgrid::cli::trajectory::Trajectory;
use stackgrid::price;

fn bundled() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/eight_users.json")
}

fn stackgrid(args: &[&str], scenario: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stackgrid"))
        .args(args)
        .arg("--scenario")
        .arg(scenario)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

/// One user with `psi_bar = 3`, one slot, two unit generators.
fn scalar_scenario(dir: &Path) -> PathBuf {
    // single weight q with q ln q = ln 3
    let (mut lo, mut hi) = (1.0f64, 3.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid * mid.ln() > 3f64.ln() { hi = mid } else { lo = mid }
    }
    let q = 0.5 * (lo + hi);
    let text = format!(
        r#"{{
  "horizon": 1,
  "q": {q:.17},
  "price": {{ "initial": 1.5, "omega": -0.5, "gamma": 0.2 }},
  "users": [ {{ "alpha": 1.0, "appliance_weights": [{q:.17}] }} ],
  "supplier": {{ "kappa": 0.3, "generator_costs": [1.0, 1.0] }},
  "supply": 2.0
}}"#
    );
    let path = dir.join("scalar.json");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn solve_writes_outputs_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = stackgrid(&["solve"], &bundled(), dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["trajectory.csv", "demand_supply.svg", "price.svg", "report.json"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let r = report(dir.path());
    assert_eq!(r["regime"], "interior");
    assert!(r["route_gap"].as_f64().unwrap() < 1e-6);
    assert!(r["runtime_seconds"].as_f64().unwrap() >= 0.0);
    assert!(r["equilibrium"]["residuals"]["state"].as_f64().unwrap() < 1e-8);
    assert_eq!(r["equilibrium"]["supply"].as_array().unwrap().len(), 20);
    assert_eq!(r["diagnostics"]["locally_optimal"], true);
}

#[test]
fn trajectory_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    assert!(stackgrid(&["solve"], &bundled(), dir.path()).status.success());
    let text = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert!(text.starts_with("t,price,supply,total_demand,d_1,"));
    let traj = Trajectory::from_csv(&text).unwrap();
    assert_eq!(traj.rows.len(), 20);
    assert_eq!(traj.to_csv(), text);

    let reduced = stackgrid::cli::load_scenario(&bundled()).unwrap().reduced;
    let supply: Vec<f64> = traj.rows.iter().map(|r| r.supply).collect();
    let demands: Vec<Vec<f64>> = (0..traj.num_users()).map(|i| traj.rows.iter().map(|r| r.demands[i]).collect()).collect();
    let recomputed = price::roll_deterministic(&reduced, &demands, &supply).unwrap();
    for (a, b) in recomputed.as_slice().iter().zip(traj.prices()) {
        assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
    }
    for row in &traj.rows {
        let sum: f64 = row.demands.iter().sum();
        assert!((sum - row.total_demand).abs() <= 1e-9 * (1.0 + sum));
        assert!((row.supply - row.total_demand - row.imbalance).abs() <= 1e-9 * (1.0 + row.supply));
    }
}

#[test]
fn malformed_scenario_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{ "horizon": 3, "q": 5.0, "price": { "initial": 1.5 } }"#).unwrap();
    let out = stackgrid(&["solve"], &bad, dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("omega") || err.contains("missing field"), "{err}");

    let text = fs::read_to_string(bundled()).unwrap().replace("\"gamma\": 0.05", "\"gamma\": -0.05");
    let bad = dir.path().join("negative_gamma.json");
    fs::write(&bad, text).unwrap();
    let out = stackgrid(&["solve"], &bad, dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gamma"));

    let out = stackgrid(&["solve"], &dir.path().join("absent.json"), dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn scalar_scenario_matches_hand_solution() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = scalar_scenario(dir.path());
    let out = stackgrid(&["solve"], &scenario, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let traj = Trajectory::from_csv(&fs::read_to_string(dir.path().join("trajectory.csv")).unwrap()).unwrap();
    assert_eq!(traj.rows.len(), 1);
    let row = &traj.rows[0];
    assert!((row.demands[0] - 1.5).abs() < 1e-9);
    assert!((row.supply - 2.4375).abs() < 1e-9);
    assert!((traj.terminal_price - 0.5625).abs() < 1e-9);
    let r = report(dir.path());
    assert!((r["equilibrium"]["theta"][0].as_f64().unwrap() - 2.15625).abs() < 1e-9);
}

#[test]
fn nash_runs_all_solvers() {
    let dir = tempfile::tempdir().unwrap();
    let out = stackgrid(&["nash", "--supply", "40"], &bundled(), dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(dir.path());
    assert_eq!(r["regime"], "interior");
    assert_eq!(r["solvers"].as_array().unwrap().len(), 3);
    for key in ["closed_form_vs_tpbv", "best_response_vs_tpbv", "closed_form_vs_best_response"] {
        assert!(r["oracle_gaps"][key].as_f64().unwrap() < 1e-6, "{key}");
    }
    assert!(dir.path().join("trajectory.csv").is_file());

    let out = stackgrid(&["nash", "--supply", "1,2"], &bundled(), dir.path());
    assert_eq!(out.status.code(), Some(2));

    let scalar = scalar_scenario(dir.path());
    let out = stackgrid(&["nash"], &scalar, dir.path());
    assert!(out.status.success());
    let traj = Trajectory::from_csv(&fs::read_to_string(dir.path().join("trajectory.csv")).unwrap()).unwrap();
    // supply from the file; d = psi_bar - p_1 when alpha = 1
    assert_eq!(traj.rows[0].supply, 2.0);
    assert!((traj.rows[0].demands[0] - 1.5).abs() < 1e-9);
}

#[test]
fn simulate_reports_certainty_equivalence() {
    let dir = tempfile::tempdir().unwrap();
    let out = stackgrid(&["simulate", "--draws", "2000", "--seed", "3"], &bundled(), dir.path());
    assert!(out.status.success());
    let r = report(dir.path());
    assert_eq!(r["draws"], 2000);
    assert!(r["fraction_within_3se"].as_f64().unwrap() >= 0.9);
    let csv = fs::read_to_string(dir.path().join("monte_carlo.csv")).unwrap();
    assert!(csv.starts_with("t,deterministic,mean,std_error,z\n"));
    assert_eq!(csv.lines().count(), 22);

    let again = tempfile::tempdir().unwrap();
    assert!(stackgrid(&["simulate", "--draws", "2000", "--seed", "3"], &bundled(), again.path()).status.success());
    assert_eq!(csv, fs::read_to_string(again.path().join("monte_carlo.csv")).unwrap());
}

#[test]
fn validate_passes_on_bundled_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let out = stackgrid(&["validate"], &bundled(), dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("report.json").is_file());
}

#[test]
fn plot_from_trajectory_file() {
    let solved = tempfile::tempdir().unwrap();
    assert!(stackgrid(&["solve"], &bundled(), solved.path()).status.success());
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_stackgrid"))
        .args(["plot", "--trajectory"])
        .arg(solved.path().join("trajectory.csv"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["demand_supply.svg", "price.svg"] {
        assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(solved.path().join(f)).unwrap());
    }
}

#[test]
fn single_slot_figures_render() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = scalar_scenario(dir.path());
    assert!(stackgrid(&["plot"], &scenario, dir.path()).status.success());
    let svg = fs::read_to_string(dir.path().join("price.svg")).unwrap();
    assert!(svg.starts_with("<svg") && !svg.contains("NaN"));
}
