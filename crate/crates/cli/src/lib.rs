//! Command-line front end: resolves a scenario, runs it and writes the
//! artifacts of the run into an output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use mffbsde::coefficients::{validate_assumptions, ProbeSpec, ValidationReport};
use mffbsde::io::canonical_json;
use mffbsde::measure_flow::{FlowSummary, MeasureFlow};
use mffbsde::mfg::{solve_equilibrium, verify_equilibrium, EquilibriumResult, VerificationReport};
use mffbsde::picard::{iterate, multi_start, ClusterVerdict, FixedPointReport, PsiMode};
use mffbsde::scenarios::{apply_override, builtin, InitSpec, Scenario, ScenarioConfig};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;
pub const EXIT_VALIDATION_FAILED: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Solver(#[from] mffbsde::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("usage: {0}")]
    Usage(String),
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "mffbsde", version, about = "Mean-field FBSDE and mean-field game solver")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the fixed-point iteration (and the equilibrium checks for games).
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Probe the coefficient assumptions of a scenario.
    Validate {
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
    /// Run the iteration from several initial flows and cluster the limits.
    Multistart {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Initial flow: a number is the amplitude of a Dirac flow at
        /// `amplitude * sin t`, otherwise a JSON init object. Defaults to the
        /// scenario's list.
        #[arg(long = "init")]
        inits: Vec<String>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct ScenarioArgs {
    /// Builtin scenario name.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    pub scenario: Option<String>,
    /// Path of a scenario JSON file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "MFFBSDE_SEED")]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Dotted-path override such as `solver.max_iter=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub mode: Option<PsiMode>,
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Builds the resolved scenario config from the builtin or file, the overrides
/// and the seed and mode flags.
pub fn resolve_config(args: &ScenarioArgs) -> Result<ScenarioConfig> {
    let mut value = match (&args.scenario, &args.config) {
        (Some(name), None) => builtin(name)?.config().to_value(),
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(io_error(path))?;
            serde_json::from_str(&text).map_err(|e| mffbsde::Error::SchemaError(e.to_string()))?
        }
        _ => return Err(CliError::Usage("exactly one of --scenario and --config is required".into())),
    };
    for item in &args.overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override `{item}` is not KEY=VALUE")))?;
        apply_override(&mut value, key.trim(), raw.trim())?;
    }
    let mut config = ScenarioConfig::from_value(value)?;
    if let Some(seed) = args.seed {
        config.solver.seed = seed;
    }
    if let Some(mode) = args.mode {
        config.solver.mode = mode;
    }
    Ok(config)
}

pub fn resolve(args: &ScenarioArgs) -> Result<Scenario> {
    Ok(Scenario::from_config(resolve_config(args)?)?)
}

/// SHA-256 of the canonical JSON of `value`, hex encoded.
pub fn config_hash(value: &Value) -> String {
    hex(&Sha256::digest(canonical_json(value).as_bytes()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Collects artifacts written into one directory, with their hashes.
struct ArtifactWriter {
    dir: PathBuf,
    artifacts: BTreeMap<String, String>,
}

impl ArtifactWriter {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(io_error(dir))?;
        Ok(Self { dir: dir.to_path_buf(), artifacts: BTreeMap::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(io_error(&path))?;
        self.artifacts.insert(name.to_string(), hex(&Sha256::digest(bytes)));
        Ok(())
    }

    fn write_json(&mut self, name: &str, value: &Value) -> Result<()> {
        self.write(name, canonical_json(value).as_bytes())
    }

    fn write_csv(&mut self, name: &str, emit: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        emit(&mut buf).map_err(io_error(&self.dir.join(name)))?;
        self.write(name, &buf)
    }

    fn finish(self, scenario: &Scenario, timings: &[(&str, f64)], exit_code: i32) -> Result<()> {
        let config = scenario.config().to_value();
        let manifest = json!({
            "scenario": scenario.name(),
            "config_hash": config_hash(&config),
            "config": config,
            "seed": scenario.solver().seed,
            "artifacts": self
                .artifacts
                .iter()
                .map(|(path, sha256)| json!({"path": path, "sha256": sha256}))
                .collect::<Vec<_>>(),
            "timings_seconds": timings.iter().map(|(k, v)| (k.to_string(), json!(v))).collect::<serde_json::Map<_, _>>(),
            "version": env!("CARGO_PKG_VERSION"),
            "exit_code": exit_code,
        });
        let path = self.dir.join("manifest.json");
        fs::write(&path, canonical_json(&manifest)).map_err(io_error(&path))
    }
}

fn to_value<T: serde::Serialize>(value: &T) -> Value {
    serde_json::to_value(value).expect("reports serialize")
}

/// Evenly spaced states spanning the 5%-95% range of the flow over time.
fn table_points(flow: &MeasureFlow, population: usize, count: usize) -> Vec<Vec<f64>> {
    let dim = flow.dim();
    let (mut lo, mut hi) = (vec![f64::INFINITY; dim], vec![f64::NEG_INFINITY; dim]);
    for row in flow.rows() {
        for c in 0..dim {
            lo[c] = lo[c].min(row[population].quantile(c, 0.05));
            hi[c] = hi[c].max(row[population].quantile(c, 0.95));
        }
    }
    (0..count)
        .map(|j| {
            let s = j as f64 / (count - 1) as f64;
            (0..dim).map(|c| lo[c] + s * (hi[c] - lo[c])).collect()
        })
        .collect()
}

/// Outcome of `run`, kept for callers that embed the CLI.
pub struct RunOutcome {
    pub exit_code: i32,
    pub report: FixedPointReport,
    pub equilibrium: Option<(EquilibriumResult, VerificationReport)>,
}

pub fn cmd_run(args: &ScenarioArgs, out: &Path) -> Result<RunOutcome> {
    let scenario = resolve(args)?;
    let outputs = scenario.config().outputs.clone();
    let mut writer = ArtifactWriter::new(out)?;
    let mut timings = Vec::new();
    let started = Instant::now();
    let mu0 = scenario.initial_flow()?;

    let (report, equilibrium) = match scenario.game() {
        None => (iterate(&scenario.system()?, &mu0, scenario.solver())?, None),
        Some(game) => {
            let result = solve_equilibrium(game, &mu0, scenario.solver())?;
            timings.push(("solve", started.elapsed().as_secs_f64()));
            let check = scenario.config().game.as_ref().expect("game scenarios carry a game section");
            let v = &check.verification;
            let verification = verify_equilibrium(game, &result, v.n_perturbations, v.magnitude, v.seed)?;
            timings.push(("verify", started.elapsed().as_secs_f64()));
            (result.report.clone(), Some((result, verification)))
        }
    };
    if equilibrium.is_none() {
        timings.push(("solve", started.elapsed().as_secs_f64()));
    }

    writer.write_json(&outputs.fixedpoint_report, &to_value(&report))?;
    writer.write_csv(&outputs.measure_flow, |buf| report.final_flow.write_csv(buf))?;
    if let Some((result, verification)) = &equilibrium {
        let equilibrium_json = json!({
            "converged": result.report.converged,
            "costs": to_value(&result.costs),
            "verification": to_value(verification),
            "config": to_value(&result.config),
        });
        writer.write_json(&outputs.equilibrium, &equilibrium_json)?;
        let mut table = Vec::new();
        for (i, controls) in result.controls.iter().enumerate() {
            let points = table_points(&result.flow, i, 41);
            let mut part = Vec::new();
            controls.write_csv(&mut part, &points).map_err(io_error(&out.join(&outputs.control_table)))?;
            if i > 0 {
                // Later populations drop the repeated header.
                let body = part.iter().position(|&b| b == b'\n').map_or(0, |p| p + 1);
                part.drain(..body);
            }
            table.extend(part);
        }
        writer.write(&outputs.control_table, &table)?;
    }
    let exit_code = if report.converged { EXIT_OK } else { EXIT_NOT_CONVERGED };
    writer.finish(&scenario, &timings, exit_code)?;
    Ok(RunOutcome { exit_code, report, equilibrium })
}

pub fn cmd_validate(args: &ScenarioArgs) -> Result<ValidationReport> {
    let scenario = resolve(args)?;
    let system = scenario.system()?;
    let seed = scenario.solver().seed;
    let probe = ProbeSpec::around(&system, scenario.grid().horizon(), seed)?;
    Ok(validate_assumptions(&system, &probe, seed)?)
}

fn parse_init(raw: &str) -> Result<InitSpec> {
    if let Ok(amplitude) = raw.trim().parse::<f64>() {
        return Ok(InitSpec::DiracSine { amplitude });
    }
    serde_json::from_str(raw).map_err(|e| CliError::Usage(format!("init `{raw}`: {e}")))
}

pub struct MultistartOutcome {
    pub verdict: ClusterVerdict,
    pub clusters: Vec<Vec<usize>>,
    pub distances: Vec<Vec<f64>>,
}

pub fn cmd_multistart(args: &ScenarioArgs, inits: &[String], out: &Path) -> Result<MultistartOutcome> {
    let mut config = resolve_config(args)?;
    if !inits.is_empty() {
        config.multistart = inits.iter().map(|s| parse_init(s)).collect::<Result<_>>()?;
    }
    if config.multistart.len() < 2 {
        return Err(CliError::Usage(format!("multistart needs at least two inits, got {}", config.multistart.len())));
    }
    let scenario = Scenario::from_config(config)?;
    let started = Instant::now();
    let flows = scenario.multistart_flows()?;
    let report = multi_start(&scenario.system()?, &flows, scenario.solver())?;
    let elapsed = started.elapsed().as_secs_f64();

    let clusters: Vec<Value> = report
        .clusters
        .iter()
        .map(|members| {
            let representative: &FlowSummary = report.reports[members[0]].iterates.last().expect("at least one iterate");
            json!({"members": members, "representative": members[0], "representative_flow": to_value(representative)})
        })
        .collect();
    let runs: Vec<Value> = report
        .reports
        .iter()
        .zip(&scenario.config().multistart)
        .map(|(r, init)| {
            json!({
                "init": to_value(init),
                "converged": r.converged,
                "iterations": r.iterations,
                "rho_history": r.rho_history,
                "holder_modulus": r.holder_modulus,
            })
        })
        .collect();
    let body = json!({
        "verdict": to_value(&report.verdict),
        "threshold": report.threshold,
        "distances": report.distances,
        "clusters": clusters,
        "runs": runs,
    });
    let mut writer = ArtifactWriter::new(out)?;
    writer.write_json(&scenario.config().outputs.clusters, &body)?;
    writer.finish(&scenario, &[("multistart", elapsed)], EXIT_OK)?;
    Ok(MultistartOutcome { verdict: report.verdict, clusters: report.clusters, distances: report.distances })
}

fn with_threads<T: Send>(threads: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(job()),
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Usage(e.to_string()))?;
            Ok(pool.install(job))
        }
    }
}

/// Runs a parsed command and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let threads = match &cli.command {
        Command::Run { scenario, .. } | Command::Validate { scenario } | Command::Multistart { scenario, .. } => {
            scenario.threads
        }
    };
    let outcome = with_threads(threads, || match &cli.command {
        Command::Run { scenario, out } => cmd_run(scenario, out).map(|o| {
            let r = &o.report;
            eprintln!(
                "{:?} after {} iterations, rho {:.4e}",
                r.status,
                r.iterations,
                r.rho_history.last().copied().unwrap_or(f64::NAN)
            );
            if let Some((_, v)) = &o.equilibrium {
                eprintln!("nash verification: {}", if v.passed { "PASS" } else { "FAIL" });
            }
            o.exit_code
        }),
        Command::Validate { scenario } => cmd_validate(scenario).map(|report| {
            print!("{}", canonical_json(&to_value(&report)));
            for failure in report.failures() {
                eprintln!("FAIL population {} {:?}: {}", failure.population, failure.check, failure.detail);
            }
            if report.passed() {
                EXIT_OK
            } else {
                EXIT_VALIDATION_FAILED
            }
        }),
        Command::Multistart { scenario, out, inits } => cmd_multistart(scenario, inits, out).map(|o| {
            eprintln!("{} cluster(s): {:?}", o.clusters.len(), o.verdict);
            EXIT_OK
        }),
    });
    match outcome.and_then(|r| r) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}
