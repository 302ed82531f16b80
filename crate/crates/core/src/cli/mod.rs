//! Command-line front end.
//!
//! ```text
//! stackgrid solve|nash|simulate|validate|plot --scenario <path> --out <dir>
//!           [--seed N] [--draws M] [--variant literal|derived]
//!           [--supply v1,v2,..] [--trajectory <csv>]
//! ```
//!
//! Every command writes into `--out`:
//!
//! | command    | files |
//! |------------|-------|
//! | `solve`    | `trajectory.csv`, `report.json`, `demand_supply.svg`, `price.svg` |
//! | `nash`     | `trajectory.csv`, `report.json`, `demand_supply.svg`, `price.svg` |
//! | `simulate` | `monte_carlo.csv`, `report.json` |
//! | `validate` | `report.json` |
//! | `plot`     | `demand_supply.svg`, `price.svg` |
//!
//! Exit codes: 0 success, 2 unreadable or invalid input, 3 numerical failure
//! (solver error, residual or equilibrium check out of tolerance).

pub mod figure;
pub mod trajectory;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::nash::{self, BestResponseOptions, NashSolution};
use crate::price;
use crate::scenario::file::ScenarioFile;
use crate::scenario::{self, ReducedScenario};
use crate::stackelberg::{self, KktBlock, SolveOptions, StackelbergOutcome, ValidationOptions};
use crate::Variant;

use figure::{Chart, Series};
use trajectory::Trajectory;

/// Residual bound a reported equilibrium must meet.
pub const RESIDUAL_BOUND: f64 = 1e-8;
pub const DEFAULT_DRAWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Solve,
    Nash,
    Simulate,
    Validate,
    Plot,
}

#[derive(Debug, Clone, PartialEq, Parser)]
#[command(name = "stackgrid", version, about = "Stackelberg and Nash equilibria for a sticky-price energy market")]
pub struct RunConfig {
    #[arg(value_enum)]
    pub command: Command,
    /// Scenario JSON file. Optional only for `plot --trajectory`.
    #[arg(long = "scenario", required_unless_present = "trajectory")]
    pub scenario_path: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long = "out")]
    pub output_dir: PathBuf,
    /// Monte Carlo master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Monte Carlo draws.
    #[arg(long)]
    pub draws: Option<usize>,
    #[arg(long, value_enum, default_value_t = VariantArg::Derived)]
    pub variant: VariantArg,
    /// Fixed supply for `nash`: one value (broadcast) or one per slot, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub supply: Option<Vec<f64>>,
    /// Trajectory CSV to plot instead of solving.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Derived,
    Literal,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Derived => Variant::Derived,
            VariantArg::Literal => Variant::Literal,
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    /// Bad input: exit code 2.
    Input(String),
    /// Solver failure or failed check: exit code 3.
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

fn numerical(e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(e.to_string())
}

/// What a successful (or check-failing) run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub files: Vec<PathBuf>,
    pub lines: Vec<String>,
}

pub struct LoadedScenario {
    pub file: ScenarioFile,
    pub reduced: ReducedScenario,
}

pub fn load_scenario(path: &Path) -> Result<LoadedScenario, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let file = ScenarioFile::from_json_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let raw = file
        .clone()
        .into_scenario()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let valid = scenario::validate(raw).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let reduced = scenario::reduce(&valid).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(LoadedScenario { file, reduced })
}

struct Output {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Output {
    fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
        Ok(Output {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        self.files.push(path);
        Ok(())
    }

    fn write_json(&mut self, name: &str, value: &serde_json::Value) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("report serializes");
        text.push('\n');
        self.write(name, &text)
    }
}

/// Runs one command. Files written before a failed check stay on disk.
pub fn run(config: &RunConfig) -> Result<RunSummary, CliError> {
    let started = Instant::now();
    let mut out = Output::new(&config.output_dir)?;
    let mut lines = Vec::new();
    if config.command == Command::Plot {
        if let Some(path) = &config.trajectory {
            let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            let traj = Trajectory::from_csv(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            write_figures(&mut out, &traj)?;
            lines.push(format!("plotted {} slots from {}", traj.rows.len(), path.display()));
            return Ok(RunSummary { files: out.files, lines });
        }
    }
    let path = config.scenario_path.as_deref().ok_or_else(|| CliError::Input("--scenario is required".into()))?;
    let loaded = load_scenario(path)?;
    let reduced = &loaded.reduced;
    let variant: Variant = config.variant.into();
    let result = match config.command {
        Command::Solve => run_solve(config, reduced, variant, &mut out, &mut lines, started),
        Command::Nash => run_nash(config, &loaded, variant, &mut out, &mut lines, started),
        Command::Simulate => run_simulate(config, reduced, variant, &mut out, &mut lines, started),
        Command::Validate => run_validate(config, reduced, variant, &mut out, &mut lines, started),
        Command::Plot => {
            let outcome = stackelberg::solve(reduced, SolveOptions { variant, ..Default::default() }).map_err(numerical)?;
            write_figures(&mut out, &equilibrium_trajectory(reduced, &outcome))?;
            lines.push("plotted equilibrium".into());
            Ok(())
        }
    };
    result.map(|()| RunSummary { files: out.files, lines })
}

fn equilibrium_trajectory(reduced: &ReducedScenario, outcome: &StackelbergOutcome) -> Trajectory {
    let eq = &outcome.equilibrium;
    Trajectory::new(reduced, &eq.supply, &eq.demands, eq.price.as_slice())
}

fn write_figures(out: &mut Output, traj: &Trajectory) -> Result<(), CliError> {
    let xs = |r: &trajectory::TrajectoryRow| r.t as f64;
    let demand_supply = Chart {
        title: "Total demand and supply".into(),
        x_label: "slot t".into(),
        y_label: "energy (kWh)".into(),
        series: vec![
            Series {
                label: "total demand".into(),
                points: traj.rows.iter().map(|r| (xs(r), r.total_demand)).collect(),
            },
            Series {
                label: "supply".into(),
                points: traj.rows.iter().map(|r| (xs(r), r.supply)).collect(),
            },
        ],
    };
    let prices = traj.prices();
    let price_chart = Chart {
        title: "Price".into(),
        x_label: "slot t".into(),
        y_label: "price ($/kWh)".into(),
        series: vec![Series {
            label: "price".into(),
            points: prices.iter().enumerate().map(|(k, &p)| ((k + 1) as f64, p)).collect(),
        }],
    };
    out.write("demand_supply.svg", &demand_supply.to_svg())?;
    out.write("price.svg", &price_chart.to_svg())
}

fn regime(outcome: &StackelbergOutcome) -> &'static str {
    if outcome.fallback_used {
        "non_interior_projected"
    } else {
        "interior"
    }
}

fn residual_check(outcome: &StackelbergOutcome) -> Result<(), CliError> {
    let eq = &outcome.equilibrium;
    let (block, value) = eq.residuals.worst();
    if !outcome.fallback_used && !(value <= RESIDUAL_BOUND) {
        return Err(CliError::Numerical(format!(
            "{} residual {value:.3e} exceeds {RESIDUAL_BOUND:e}",
            block_name(block)
        )));
    }
    Ok(())
}

pub fn block_name(block: KktBlock) -> &'static str {
    match block {
        KktBlock::State => "state",
        KktBlock::LeaderStationarity => "leader_stationarity",
        KktBlock::DemandStationarity => "demand_stationarity",
        KktBlock::ThetaAdjoint => "theta_adjoint",
        KktBlock::MuRecursion => "mu_recursion",
        KktBlock::FollowerResponse => "follower_response",
        KktBlock::BRecursion => "b_recursion",
    }
}

fn scenario_summary(reduced: &ReducedScenario) -> serde_json::Value {
    json!({
        "users": reduced.num_users(),
        "slots": reduced.slots(),
        "initial_price": reduced.initial_price(),
        "gamma": reduced.gamma(),
        "psi_bar": reduced.psi_bar_table(),
        "delta_bar": reduced.delta_bar_table(),
    })
}

fn run_solve(
    config: &RunConfig,
    reduced: &ReducedScenario,
    variant: Variant,
    out: &mut Output,
    lines: &mut Vec<String>,
    started: Instant,
) -> Result<(), CliError> {
    let outcome = stackelberg::solve(reduced, SolveOptions { variant, ..Default::default() }).map_err(numerical)?;
    let diagnostics = stackelberg::validate_equilibrium(
        reduced,
        &outcome.equilibrium,
        ValidationOptions {
            seed: config.seed.unwrap_or(0),
            ..Default::default()
        },
    )
    .map_err(numerical)?;
    let traj = equilibrium_trajectory(reduced, &outcome);
    out.write("trajectory.csv", &traj.to_csv())?;
    write_figures(out, &traj)?;
    let eq = &outcome.equilibrium;
    let user_costs: Vec<f64> = (0..reduced.num_users())
        .map(|i| nash::follower_cost(reduced, i, &eq.demands[i], eq.price.as_slice()))
        .collect();
    let report = json!({
        "command": "solve",
        "variant": variant,
        "regime": regime(&outcome),
        "scenario": scenario_summary(reduced),
        "equilibrium": eq,
        "total_demand": eq.total_demands(),
        "user_costs": user_costs,
        "route_gap": outcome.route_gap,
        "kkt": outcome.kkt,
        "kkt_error": outcome.kkt_error,
        "reduced_qp_non_interior": outcome.reduced_qp.non_interior,
        "probes_interior": outcome.probes_interior,
        "diagnostics": diagnostics,
        "runtime_seconds": started.elapsed().as_secs_f64(),
    });
    out.write_json("report.json", &report)?;
    lines.push(format!(
        "regime {} | leader cost {} | terminal price {} | route gap {}",
        regime(&outcome),
        trajectory::format_number(eq.leader_cost),
        trajectory::format_number(eq.price.terminal()),
        outcome.route_gap.map_or("n/a".into(), |g| format!("{g:.3e}")),
    ));
    residual_check(&outcome)
}

fn run_validate(
    config: &RunConfig,
    reduced: &ReducedScenario,
    variant: Variant,
    out: &mut Output,
    lines: &mut Vec<String>,
    started: Instant,
) -> Result<(), CliError> {
    let outcome = stackelberg::solve(reduced, SolveOptions { variant, ..Default::default() }).map_err(numerical)?;
    let options = ValidationOptions {
        seed: config.seed.unwrap_or(0),
        ..Default::default()
    };
    let mut routes = vec![("equilibrium", &outcome.equilibrium)];
    if let Some(k) = &outcome.kkt {
        routes.push(("kkt_system", k));
    }
    let mut checks = serde_json::Map::new();
    let mut failures = Vec::new();
    for (name, sol) in routes {
        let d = stackelberg::validate_equilibrium(reduced, sol, options).map_err(numerical)?;
        if !d.passed() {
            failures.push(format!(
                "{name}: follower gap {:.3e}, worst leader decrease {:.3e}",
                d.follower_gap, d.worst_decrease
            ));
        }
        lines.push(format!(
            "{name}: follower gap {:.3e} | worst leader decrease {:.3e} | max residual {:.3e} ({})",
            d.follower_gap,
            d.worst_decrease,
            d.residuals.max(),
            block_name(d.residuals.worst().0)
        ));
        checks.insert(name.into(), serde_json::to_value(&d).expect("serializes"));
    }
    let certificate = outcome.reduced_qp.hessian_psd;
    if certificate == Some(false) {
        failures.push(format!(
            "reduced Hessian not PSD (min eigenvalue {:?})",
            outcome.reduced_qp.hessian_min_eigenvalue
        ));
    }
    out.write_json(
        "report.json",
        &json!({
            "command": "validate",
            "variant": variant,
            "regime": regime(&outcome),
            "checks": checks,
            "hessian_psd": certificate,
            "hessian_min_eigenvalue": outcome.reduced_qp.hessian_min_eigenvalue,
            "route_gap": outcome.route_gap,
            "passed": failures.is_empty(),
            "failures": failures,
            "runtime_seconds": started.elapsed().as_secs_f64(),
        }),
    )?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(failures.join("; ")))
    }
}

fn supply_for(config: &RunConfig, loaded: &LoadedScenario) -> Result<Vec<f64>, CliError> {
    let slots = loaded.reduced.slots();
    let supply = match (&config.supply, loaded.file.supply()) {
        (Some(v), _) if v.len() == 1 => vec![v[0]; slots],
        (Some(v), _) => v.clone(),
        (None, Some(v)) => v,
        (None, None) => return Err(CliError::Input("nash needs a supply: add \"supply\" to the scenario or pass --supply".into())),
    };
    if supply.len() != slots {
        return Err(CliError::Input(format!("supply has {} entries, horizon is {slots}", supply.len())));
    }
    if supply.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(CliError::Input("supply entries must be finite and nonnegative".into()));
    }
    Ok(supply)
}

#[derive(Serialize)]
struct SolverRecord<'a> {
    method: &'a str,
    interior: Option<bool>,
    iterations: Option<usize>,
    relaxation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn run_nash(
    config: &RunConfig,
    loaded: &LoadedScenario,
    variant: Variant,
    out: &mut Output,
    lines: &mut Vec<String>,
    started: Instant,
) -> Result<(), CliError> {
    let reduced = &loaded.reduced;
    let supply = supply_for(config, loaded)?;
    let closed = nash::solve_closed_form_with(reduced, &supply, variant);
    let tpbv = nash::solve_tpbv(reduced, &supply);
    let br = nash::solve_best_response(reduced, &supply, BestResponseOptions::default());
    let record = |name: &'static str, r: &Result<NashSolution, nash::NashError>| match r {
        Ok(s) => SolverRecord {
            method: name,
            interior: Some(s.interior),
            iterations: s.iterations,
            relaxation: s.relaxation,
            error: None,
        },
        Err(e) => SolverRecord {
            method: name,
            interior: None,
            iterations: None,
            relaxation: None,
            error: Some(e.to_string()),
        },
    };
    let solvers = vec![record("closed_form", &closed), record("tpbv", &tpbv), record("best_response", &br)];
    let gap = |a: &Result<NashSolution, _>, b: &Result<NashSolution, _>| match (a, b) {
        (Ok(a), Ok(b)) => Some(NashSolution::max_demand_gap(a, b)),
        _ => None,
    };
    let gaps = json!({
        "closed_form_vs_tpbv": gap(&closed, &tpbv),
        "best_response_vs_tpbv": gap(&br, &tpbv),
        "closed_form_vs_best_response": gap(&closed, &br),
    });
    // Closed form is authoritative on the interior; the projected best response off it.
    let interior = matches!(&tpbv, Ok(s) if s.interior);
    let (regime, chosen) = match (interior, &closed, &br) {
        (true, Ok(c), _) => ("interior", c),
        (_, _, Ok(b)) => ("non_interior_best_response", b),
        (_, Ok(c), Err(_)) => ("interior", c),
        (_, Err(e), Err(_)) => return Err(numerical(e)),
    };
    let traj = Trajectory::new(reduced, &supply, &chosen.demands, chosen.price.as_slice());
    out.write("trajectory.csv", &traj.to_csv())?;
    write_figures(out, &traj)?;
    out.write_json(
        "report.json",
        &json!({
            "command": "nash",
            "variant": variant,
            "regime": regime,
            "reported_method": chosen.method,
            "supply": supply,
            "solvers": solvers,
            "oracle_gaps": gaps,
            "solution": chosen,
            "stationarity_residual": nash::stationarity_residual(reduced, chosen),
            "runtime_seconds": started.elapsed().as_secs_f64(),
        }),
    )?;
    lines.push(format!("regime {regime} | oracle gaps {gaps}"));
    if let Err(e) = &br {
        return Err(numerical(e));
    }
    Ok(())
}

fn run_simulate(
    config: &RunConfig,
    reduced: &ReducedScenario,
    variant: Variant,
    out: &mut Output,
    lines: &mut Vec<String>,
    started: Instant,
) -> Result<(), CliError> {
    let outcome = stackelberg::solve(reduced, SolveOptions { variant, ..Default::default() }).map_err(numerical)?;
    let eq = &outcome.equilibrium;
    let draws = config.draws.unwrap_or(DEFAULT_DRAWS);
    let seed = config.seed.unwrap_or(0);
    let mc = price::monte_carlo_mean(reduced, &eq.demands, &eq.supply, draws, seed).map_err(|e| CliError::Input(e.to_string()))?;
    let det = eq.price.as_slice();
    let mut csv = String::from("t,deterministic,mean,std_error,z\n");
    let mut within = 0usize;
    let mut counted = 0usize;
    let mut max_gap = 0.0f64;
    for t in 0..det.len() {
        let gap = mc.mean[t] - det[t];
        max_gap = max_gap.max(gap.abs());
        let se = mc.std_error[t];
        let z = if se > 0.0 { gap / se } else { 0.0 };
        if se > 0.0 {
            counted += 1;
            if z.abs() <= 3.0 {
                within += 1;
            }
        }
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            t + 1,
            trajectory::format_number(det[t]),
            trajectory::format_number(mc.mean[t]),
            trajectory::format_number(se),
            trajectory::format_number(z)
        ));
    }
    out.write("monte_carlo.csv", &csv)?;
    let fraction = if counted > 0 { within as f64 / counted as f64 } else { 1.0 };
    out.write_json(
        "report.json",
        &json!({
            "command": "simulate",
            "draws": draws,
            "seed": seed,
            "noise_variance": reduced.noise_variance(),
            "max_abs_gap": max_gap,
            "slots_within_3se": within,
            "slots_with_noise": counted,
            "fraction_within_3se": fraction,
            "deterministic": det,
            "mean": mc.mean,
            "std_error": mc.std_error,
            "runtime_seconds": started.elapsed().as_secs_f64(),
        }),
    )?;
    lines.push(format!(
        "{draws} draws | max |mean - deterministic| {max_gap:.3e} | {within}/{counted} slots within 3 SE"
    ));
    Ok(())
}

/// Parses arguments, runs, prints, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let config = match RunConfig::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&config) {
        Ok(summary) => {
            for l in &summary.lines {
                println!("{l}");
            }
            for f in &summary.files {
                println!("wrote {}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("stackgrid: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flags() {
        let c = RunConfig::try_parse_from([
            "stackgrid", "nash", "--scenario", "s.json", "--out", "o", "--supply", "1,2.5", "--variant", "literal", "--seed", "7",
        ])
        .unwrap();
        assert_eq!(c.command, Command::Nash);
        assert_eq!(c.supply, Some(vec![1.0, 2.5]));
        assert_eq!(c.variant, VariantArg::Literal);
        assert_eq!(c.seed, Some(7));
    }

    #[test]
    fn unknown_command_is_usage_error() {
        assert_eq!(main_with_args(["stackgrid", "frobnicate", "--scenario", "x", "--out", "y"]), 2);
    }
}
