//! `derms` command line.
//!
//! Exit codes: 0 success, 2 usage, 3 invalid configuration or input,
//! 4 I/O, 5 runtime failure (plant divergence, oracle non-convergence,
//! aborted run). Every failure prints one line `error[<category>]: <text>`
//! to stderr.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{solve_central, CentralInstance};
use crate::services::ViolationMetrics;
use crate::sim::{builtin, run, Mode, RunSummary, Scenario, CATALOG};

#[derive(Debug, Parser)]
#[command(name = "derms", version, about = "DER management simulator with adaptive step sizes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario, writing its trajectory CSV and summary JSON.
    Run(RunArgs),
    /// Side-by-side violation metrics of two runs of one scenario.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Also write the comparison as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// List the built-in scenarios.
    Catalog,
    /// Solve a centralized instance file and print the solution as JSON.
    Oracle { instance: PathBuf },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Built-in scenario name or path to a scenario TOML file.
    #[arg(long)]
    pub scenario: String,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Override a scenario field, `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Summary JSON written by `run`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    #[serde(flatten)]
    pub summary: RunSummary,
    pub runtime_s: f64,
    pub trajectory_csv: PathBuf,
    pub summary_json: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDelta {
    pub max_violation: f64,
    pub integral_violation: f64,
    pub oscillation_count: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceComparison {
    pub a: ViolationMetrics,
    pub b: ViolationMetrics,
    /// `b - a`.
    pub delta: MetricsDelta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLabel {
    pub mode: Mode,
    pub seed: u64,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub scenario_id: String,
    pub a: RunLabel,
    pub b: RunLabel,
    pub services: BTreeMap<String, ServiceComparison>,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => 4,
        Error::Divergence(_) | Error::Singular(_) | Error::OracleNonConvergence(_) => 5,
        _ => 3,
    }
}

/// Resolve `--scenario` and apply mode, seed and overrides.
pub fn load_scenario(args: &RunArgs) -> Result<Scenario> {
    let mode = args.mode.unwrap_or_default();
    let mut sc = match builtin(&args.scenario, mode) {
        Some(sc) => sc,
        None => {
            let path = Path::new(&args.scenario);
            if !path.exists() {
                let names: Vec<&str> = CATALOG.iter().map(|(n, _)| *n).collect();
                return Err(Error::Config(format!(
                    "{:?} is neither a built-in scenario ({}) nor a file",
                    args.scenario,
                    names.join(", ")
                )));
            }
            let mut sc = Scenario::load(path)?;
            if let Some(m) = args.mode {
                sc.mode = m;
            }
            sc
        }
    };
    if let Some(seed) = args.seed {
        sc.seed = seed;
    }
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        sc.apply_override(k.trim(), v)?;
    }
    sc.validate()?;
    Ok(sc)
}

pub fn cmd_run(args: &RunArgs) -> Result<RunReport> {
    let sc = load_scenario(args)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let stem = format!("{}-{}", sc.id, sc.mode);
    let csv_path = args.out.join(format!("{stem}.csv"));
    let json_path = args.out.join(format!("{stem}.json"));

    let start = Instant::now();
    let traj = run(&sc)?;
    let runtime_s = start.elapsed().as_secs_f64();
    traj.save_csv(&csv_path)?;
    let report = RunReport { summary: traj.summary(), runtime_s, trajectory_csv: csv_path, summary_json: json_path.clone() };
    write_json(&json_path, &report)?;
    Ok(report)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_summary(path: &Path) -> Result<RunSummary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn cmd_compare(a_path: &Path, b_path: &Path) -> Result<Comparison> {
    let a = read_summary(a_path)?;
    let b = read_summary(b_path)?;
    if a.scenario_id != b.scenario_id {
        return Err(Error::Config(format!("reports are for different scenarios: {} and {}", a.scenario_id, b.scenario_id)));
    }
    let mut services = BTreeMap::new();
    for (id, ma) in &a.metrics {
        let mb = b.metrics.get(id).ok_or_else(|| Error::Config(format!("{} has no service {id}", b_path.display())))?;
        let delta = MetricsDelta {
            max_violation: mb.max_violation - ma.max_violation,
            integral_violation: mb.integral_violation - ma.integral_violation,
            oscillation_count: mb.oscillation_count as i64 - ma.oscillation_count as i64,
        };
        services.insert(id.clone(), ServiceComparison { a: *ma, b: *mb, delta });
    }
    if let Some(id) = b.metrics.keys().find(|k| !a.metrics.contains_key(*k)) {
        return Err(Error::Config(format!("{} has no service {id}", a_path.display())));
    }
    Ok(Comparison {
        scenario_id: a.scenario_id,
        a: RunLabel { mode: a.mode, seed: a.seed, path: a_path.to_path_buf() },
        b: RunLabel { mode: b.mode, seed: b.seed, path: b_path.to_path_buf() },
        services,
    })
}

/// Human-readable comparison table.
pub fn render_comparison(c: &Comparison) -> String {
    let mut s = format!(
        "scenario {}\nA: {} seed {} ({})\nB: {} seed {} ({})\n",
        c.scenario_id,
        c.a.mode,
        c.a.seed,
        c.a.path.display(),
        c.b.mode,
        c.b.seed,
        c.b.path.display()
    );
    s += &format!("{:<10} {:<20} {:>14} {:>14} {:>14}\n", "service", "metric", "A", "B", "B - A");
    for (id, sc) in &c.services {
        let rows = [
            ("max_violation", sc.a.max_violation, sc.b.max_violation, sc.delta.max_violation),
            ("integral_violation", sc.a.integral_violation, sc.b.integral_violation, sc.delta.integral_violation),
        ];
        for (name, a, b, d) in rows {
            s += &format!("{id:<10} {name:<20} {a:>14.6e} {b:>14.6e} {d:>14.6e}\n");
        }
        s += &format!(
            "{id:<10} {:<20} {:>14} {:>14} {:>14}\n",
            "oscillation_count", sc.a.oscillation_count, sc.b.oscillation_count, sc.delta.oscillation_count
        );
    }
    s
}

/// Execute a parsed command, writing normal output to `out`.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let io = |e: std::io::Error| Error::io("<stdout>", e);
    match &cli.command {
        Command::Run(args) => {
            let report = cmd_run(args)?;
            let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
            writeln!(out, "{text}").map_err(io)?;
            if let Some(d) = &report.summary.diagnostic {
                return Err(Error::Divergence(d.clone()));
            }
        }
        Command::Compare { a, b, json } => {
            let c = cmd_compare(a, b)?;
            write!(out, "{}", render_comparison(&c)).map_err(io)?;
            if let Some(path) = json {
                write_json(path, &c)?;
            }
        }
        Command::Catalog => {
            for (name, about) in CATALOG {
                writeln!(out, "{name:<14} {about}").map_err(io)?;
            }
        }
        Command::Oracle { instance } => {
            let inst = CentralInstance::load(instance)?;
            let sol = solve_central(&inst)?;
            let text = serde_json::to_string_pretty(&sol).map_err(|e| Error::Config(e.to_string()))?;
            writeln!(out, "{text}").map_err(io)?;
        }
    }
    Ok(())
}

/// Single-line error report.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\n', " ");
    format!("error[{}]: {msg}", e.category())
}
