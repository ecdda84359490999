//! Experiment driver: loads a scenario, runs one subcommand, persists tables and fields,
//! and reports every invariant it checked.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use hardy_control::Scenario;
use serde::Serialize;

pub mod commands;
pub mod output;

pub use output::{Manifest, RunDir};

#[derive(Debug, Parser)]
#[command(name = "hhctl", version, about = "Hierarchical control experiments for the heat equation with an inverse-square potential")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Scenario file (TOML).
    #[arg(long)]
    pub scenario: PathBuf,
    /// Output directory; defaults to `hhctl-out/<scenario name>/<subcommand>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parallel workers for sweeps.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Comma-separated tolerances epsilon; overrides the scenario list.
    #[arg(long, value_delimiter = ',')]
    pub eps: Vec<f64>,
}

/// Extra axes for `sweep`; an omitted axis keeps the scenario value.
#[derive(Debug, Clone, Default, Args)]
pub struct SweepAxes {
    /// Follower weights (both followers share each value).
    #[arg(long, value_delimiter = ',')]
    pub alpha: Vec<f64>,
    /// Potential strengths.
    #[arg(long, value_delimiter = ',')]
    pub mu: Vec<f64>,
    /// Cells per axis.
    #[arg(long, value_delimiter = ',')]
    pub cells: Vec<usize>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Linear Nash equilibrium by CG and by fixed point, with an agreement report.
    Nash(Common),
    /// Epsilon sweep of the leader's penalised dual problem.
    Leader(Common),
    /// Observability ratios over random terminal data.
    Observability(Common),
    /// Carleman inequality ratios and the weight function.
    Carleman(Common),
    /// Quasi-equilibrium, equilibrium probes and the semilinear leader loop.
    Semilinear(Common),
    /// The full invariant suite.
    Verify(Common),
    /// Cartesian sweep over mu, alpha, epsilon and resolution.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        axes: SweepAxes,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Nash(_) => "nash",
            Command::Leader(_) => "leader",
            Command::Observability(_) => "observability",
            Command::Carleman(_) => "carleman",
            Command::Semilinear(_) => "semilinear",
            Command::Verify(_) => "verify",
            Command::Sweep { .. } => "sweep",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::Nash(c) | Command::Leader(c) | Command::Observability(c) | Command::Carleman(c) | Command::Semilinear(c) | Command::Verify(c) => c,
            Command::Sweep { common, .. } => common,
        }
    }
}

/// Loaded scenario plus the resolved command-line overrides.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub scenario: Scenario,
    pub text: String,
    pub seed: u64,
    pub workers: usize,
    pub epsilons: Vec<f64>,
}

impl RunContext {
    pub fn load(common: &Common) -> Result<Self> {
        let text = std::fs::read_to_string(&common.scenario).with_context(|| format!("reading {}", common.scenario.display()))?;
        let base = common.scenario.parent().unwrap_or(Path::new("."));
        let scenario = Scenario::from_toml(&text, base)?;
        if common.eps.iter().any(|e| !(*e > 0.0)) {
            anyhow::bail!("--eps values must be positive, got {:?}", common.eps);
        }
        let epsilons = if common.eps.is_empty() { scenario.leader.epsilons.clone() } else { common.eps.clone() };
        Ok(RunContext { seed: common.seed.unwrap_or(scenario.seed), workers: common.workers.max(1), epsilons, scenario, text })
    }

    pub fn rng(&self) -> rand_chacha::ChaCha8Rng {
        rand::SeedableRng::seed_from_u64(self.seed)
    }
}

/// Machine-readable summary printed on failure.
#[derive(Debug, Serialize)]
pub struct FailureReport<'a> {
    pub status: &'static str,
    pub subcommand: &'a str,
    pub manifest: Option<String>,
    pub failures: Vec<output::CheckRecord>,
}

/// Run one subcommand; the manifest is written even when a step errors.
pub fn run(cmd: &Command) -> (i32, String) {
    let common = cmd.common();
    let name = cmd.name();
    let ctx = match RunContext::load(common) {
        Ok(c) => c,
        Err(e) => return (2, failure_json(name, None, vec![record("load_scenario", &e)])),
    };
    let root = common.out.clone().unwrap_or_else(|| PathBuf::from("hhctl-out").join(&ctx.scenario.name).join(name));
    let mut out = match RunDir::create(&root) {
        Ok(o) => o,
        Err(e) => return (2, failure_json(name, None, vec![record("output_directory", &e)])),
    };
    let result = out.write_text("scenario.toml", "toml", &ctx.text).and_then(|_| match cmd {
        Command::Nash(_) => commands::nash(&ctx, &mut out),
        Command::Leader(_) => commands::leader(&ctx, &mut out),
        Command::Observability(_) => commands::observability(&ctx, &mut out),
        Command::Carleman(_) => commands::carleman(&ctx, &mut out),
        Command::Semilinear(_) => commands::semilinear(&ctx, &mut out),
        Command::Verify(_) => commands::verify(&ctx, &mut out),
        Command::Sweep { axes, .. } => commands::sweep(&ctx, axes, &mut out),
    });
    let mut code = 0;
    if let Err(e) = result {
        out.checks.push(record("run", &e));
        code = 2;
    }
    let manifest_path = root.join("manifest.json");
    if let Err(e) = out.finish(name, &common.scenario.display().to_string(), &output::scenario_hash(&ctx.text), ctx.seed) {
        out.checks.push(record("manifest", &e));
        code = 2;
    }
    if out.passed() {
        return (0, format!("{name}: {} invariants passed; manifest {}", out.checks.len(), manifest_path.display()));
    }
    let failures = out.failures().into_iter().cloned().collect();
    (if code == 0 { 1 } else { code }, failure_json(name, Some(manifest_path.display().to_string()), failures))
}

fn record(name: &str, e: &anyhow::Error) -> output::CheckRecord {
    output::CheckRecord { name: name.into(), passed: false, detail: format!("{e:#}") }
}

fn failure_json(subcommand: &str, manifest: Option<String>, failures: Vec<output::CheckRecord>) -> String {
    let report = FailureReport { status: "fail", subcommand, manifest, failures };
    serde_json::to_string(&report).unwrap_or_else(|e| format!("{{\"status\":\"fail\",\"error\":\"{e}\"}}"))
}
