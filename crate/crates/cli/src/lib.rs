//! Command-line driver: argument parsing, configuration layering, and
//! reproducible result files.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use config::{Command, Overrides, RunConfig};
use error::CliError;
use output::{manifest_path, render, write_atomic, ManifestCore, RunManifest, TOOL, VERSION};

#[derive(Debug, Parser)]
#[command(
    name = "hetphase",
    version,
    about = "Repeatable heterodyne phase-measurement simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Sub,
}

#[derive(Debug, Subcommand)]
pub enum Sub {
    /// Outcome density on a square grid around the displacement.
    ProbDensity(CommonArgs),
    /// Marginal phase density on an angular grid.
    PhaseDensity(CommonArgs),
    /// Independent single-shot measurements.
    Measure(CommonArgs),
    /// One sequence of repeated measurements on the same system.
    Repeat(CommonArgs),
    /// Phase sensitivity along the optimal state family.
    Sensitivity(CommonArgs),
    /// Heisenberg-shift residuals and the indirect-measurement comparison.
    VerifyInteraction(CommonArgs),
    /// Derived probe frequencies, restriction checks and resonant terms.
    PlanFrequencies(CommonArgs),
    /// Deviation of the integrated outcome operators from the identity.
    CompletenessCheck(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// TOML file with the same keys as the flags (snake_case); flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Manifest of an earlier run whose configuration is reused.
    #[arg(long)]
    pub replay: Option<PathBuf>,
    /// Result file; a sidecar `<out>.manifest.json` is written next to it.
    /// Without it the result goes to standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Sub {
    fn split(self) -> (Command, CommonArgs) {
        match self {
            Sub::ProbDensity(a) => (Command::ProbDensity, a),
            Sub::PhaseDensity(a) => (Command::PhaseDensity, a),
            Sub::Measure(a) => (Command::Measure, a),
            Sub::Repeat(a) => (Command::Repeat, a),
            Sub::Sensitivity(a) => (Command::Sensitivity, a),
            Sub::VerifyInteraction(a) => (Command::VerifyInteraction, a),
            Sub::PlanFrequencies(a) => (Command::PlanFrequencies, a),
            Sub::CompletenessCheck(a) => (Command::CompletenessCheck, a),
        }
    }
}

/// Replayed manifest, then config file, then flags.
pub fn resolve(command: Command, args: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut layered = Overrides::default();
    if let Some(path) = &args.replay {
        let m = RunManifest::load(path)?;
        if m.core.config.command != command {
            return Err(CliError::Validation(format!(
                "manifest {} records `{}`, not `{}`",
                path.display(),
                m.core.config.command.name(),
                command.name()
            )));
        }
        layered = Overrides::from(&m.core.config);
    }
    if let Some(path) = &args.config {
        layered = layered.layered(Overrides::from_toml_file(path)?);
    }
    layered = layered.layered(args.overrides.clone());
    RunConfig::resolve(command, layered)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let (command, args) = cli.command.split();
    let cfg = resolve(command, &args)?;
    let start = Instant::now();
    let executed = commands::execute(&cfg)?;
    let core = ManifestCore {
        tool: TOOL.into(),
        version: VERSION.into(),
        seed: cfg.seed,
        diagnostics: executed.report.diagnostics.clone(),
        config: cfg.clone(),
    };
    let text = render(&executed.report, &core, cfg.format)?;
    match &args.out {
        Some(out) => {
            write_atomic(out, &text)?;
            let manifest = RunManifest {
                core,
                duration_seconds: start.elapsed().as_secs_f64(),
            };
            let mut m = serde_json::to_string_pretty(&manifest)
                .map_err(|e| CliError::Numerical(e.to_string()))?;
            m.push('\n');
            write_atomic(&manifest_path(out), &m)?;
        }
        None => print!("{text}"),
    }
    match executed.failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
