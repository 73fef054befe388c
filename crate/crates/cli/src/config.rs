//! Run configuration: flags, an optional TOML file and manifest replay,
//! resolved into a fully specified `RunConfig`.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use hetphase_core::c64;
use hetphase_core::twinbeam::{optimal_split, DisplacedTwinBeamParams};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    ProbDensity,
    PhaseDensity,
    Measure,
    Repeat,
    Sensitivity,
    VerifyInteraction,
    PlanFrequencies,
    CompletenessCheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::ProbDensity => "prob-density",
            Command::PhaseDensity => "phase-density",
            Command::Measure => "measure",
            Command::Repeat => "repeat",
            Command::Sensitivity => "sensitivity",
            Command::VerifyInteraction => "verify-interaction",
            Command::PlanFrequencies => "plan-frequencies",
            Command::CompletenessCheck => "completeness-check",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// Every setting is optional here; unset values fall back to the config
/// file, then to per-command defaults.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    /// Twin-beam parameter of the measured state, in [0, 1).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Twin-beam parameter of the detector probe (0 for measure, repeat,
    /// completeness-check and verify-interaction, otherwise --lambda).
    #[arg(long)]
    pub det_lambda: Option<f64>,
    /// Detection efficiency, in (0, 1].
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub w_re: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub w_im: Option<f64>,
    /// Photon-number cutoff per mode.
    #[arg(long)]
    pub n_max: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Grid half-width in standard deviations of the outcome.
    #[arg(long)]
    pub grid_halfwidth: Option<f64>,
    #[arg(long)]
    pub grid_nodes: Option<usize>,
    /// Comma-separated mean photon numbers.
    #[arg(long, value_delimiter = ',')]
    pub n_bars: Option<Vec<f64>>,
    #[arg(long)]
    pub omega_a: Option<f64>,
    #[arg(long)]
    pub omega_b: Option<f64>,
    #[arg(long)]
    pub omega_c: Option<f64>,
    /// Use the closed-form Gaussian instead of the Fock-space evaluation.
    #[arg(long)]
    pub closed_form: Option<bool>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

impl Overrides {
    /// Values set in `top` replace those in `self`.
    pub fn layered(self, top: Overrides) -> Overrides {
        macro_rules! pick {
            ($($f:ident),*) => {
                Overrides { $($f: top.$f.or(self.$f)),* }
            };
        }
        pick!(
            lambda,
            det_lambda,
            eta,
            w_re,
            w_im,
            n_max,
            steps,
            samples,
            seed,
            grid_halfwidth,
            grid_nodes,
            n_bars,
            omega_a,
            omega_b,
            omega_c,
            closed_form,
            format
        )
    }

    pub fn from_toml_file(path: &Path) -> Result<Overrides, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))
    }
}

/// Fully resolved settings; serialized into every manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    pub lambda: f64,
    pub det_lambda: f64,
    pub eta: f64,
    pub w_re: f64,
    pub w_im: f64,
    pub n_max: usize,
    pub steps: usize,
    pub samples: usize,
    pub seed: u64,
    pub grid_halfwidth: f64,
    pub grid_nodes: usize,
    pub n_bars: Vec<f64>,
    pub omega_a: f64,
    pub omega_b: f64,
    pub omega_c: f64,
    pub closed_form: bool,
    pub format: Format,
}

impl From<&RunConfig> for Overrides {
    fn from(c: &RunConfig) -> Self {
        Overrides {
            lambda: Some(c.lambda),
            det_lambda: Some(c.det_lambda),
            eta: Some(c.eta),
            w_re: Some(c.w_re),
            w_im: Some(c.w_im),
            n_max: Some(c.n_max),
            steps: Some(c.steps),
            samples: Some(c.samples),
            seed: Some(c.seed),
            grid_halfwidth: Some(c.grid_halfwidth),
            grid_nodes: Some(c.grid_nodes),
            n_bars: Some(c.n_bars.clone()),
            omega_a: Some(c.omega_a),
            omega_b: Some(c.omega_b),
            omega_c: Some(c.omega_c),
            closed_form: Some(c.closed_form),
            format: Some(c.format),
        }
    }
}

/// Where the output goes; kept out of `RunConfig` so results do not depend on it.
#[derive(Debug, Clone, Default)]
pub struct Destination {
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn resolve(command: Command, o: Overrides) -> Result<RunConfig, CliError> {
        let sampled = matches!(command, Command::Measure | Command::Repeat);
        let lambda = o.lambda.unwrap_or(match command {
            Command::VerifyInteraction => 0.0,
            _ => 0.6,
        });
        let det_lambda = o.det_lambda.unwrap_or(match command {
            Command::VerifyInteraction
            | Command::Measure
            | Command::Repeat
            | Command::CompletenessCheck => 0.0,
            _ => lambda,
        });
        let eta = o.eta.unwrap_or(1.0);
        let w_re = o.w_re.unwrap_or(1.0);
        let w_im = o.w_im.unwrap_or(0.0);
        let n_bars = o.n_bars.unwrap_or_else(|| match command {
            Command::PhaseDensity => Vec::new(),
            _ => vec![10.0, 20.0, 40.0],
        });
        let grid_nodes = o.grid_nodes.unwrap_or(match command {
            Command::ProbDensity => 101,
            Command::PhaseDensity => 360,
            Command::CompletenessCheck => 201,
            _ if sampled => 31,
            _ => 0,
        });
        let grid_halfwidth = o.grid_halfwidth.unwrap_or(6.0);

        check_range(
            "lambda",
            lambda,
            (0.0..1.0).contains(&lambda),
            "must lie in [0, 1)",
        )?;
        check_range(
            "det-lambda",
            det_lambda,
            (0.0..1.0).contains(&det_lambda),
            "must lie in [0, 1)",
        )?;
        check_range("eta", eta, eta > 0.0 && eta <= 1.0, "must lie in (0, 1]")?;
        check_range("w-re", w_re, w_re.is_finite(), "must be finite")?;
        check_range("w-im", w_im, w_im.is_finite(), "must be finite")?;
        check_range(
            "grid-halfwidth",
            grid_halfwidth,
            grid_halfwidth > 0.0 && grid_halfwidth.is_finite(),
            "must be positive",
        )?;
        for &n in &n_bars {
            check_range(
                "n-bars",
                n,
                n > 2.0 && n.is_finite(),
                "each entry must exceed 2",
            )?;
        }

        let n_max = match o.n_max {
            Some(n) => n,
            None => default_n_max(command, lambda, c64::new(w_re, w_im), &n_bars, eta)?,
        };
        let uses_cutoff = !matches!(command, Command::Sensitivity | Command::PlanFrequencies);
        if uses_cutoff && n_max < 1 {
            return Err(CliError::Validation("n-max must be at least 1".into()));
        }
        let cfg = RunConfig {
            command,
            lambda,
            det_lambda,
            eta,
            w_re,
            w_im,
            n_max,
            steps: o
                .steps
                .unwrap_or(if command == Command::Measure { 1 } else { 20 }),
            samples: o.samples.unwrap_or(1),
            seed: o.seed.unwrap_or(0),
            grid_halfwidth,
            grid_nodes,
            n_bars,
            omega_a: o.omega_a.unwrap_or(1.0),
            omega_b: o.omega_b.unwrap_or(3.0),
            omega_c: o.omega_c.unwrap_or(4.5),
            closed_form: o.closed_form.unwrap_or(false),
            format: o.format.unwrap_or_default(),
        };
        cfg.check_counts()?;
        Ok(cfg)
    }

    fn check_counts(&self) -> Result<(), CliError> {
        if self.steps < 1 {
            return Err(CliError::Validation("steps must be at least 1".into()));
        }
        if self.samples < 1 {
            return Err(CliError::Validation("samples must be at least 1".into()));
        }
        if self.command == Command::Measure && self.steps != 1 {
            return Err(CliError::Validation(
                "measure takes a single step; use repeat for sequences".into(),
            ));
        }
        let min_nodes = match self.command {
            Command::Measure | Command::Repeat => 21,
            Command::PhaseDensity | Command::CompletenessCheck => 2,
            Command::ProbDensity => 1,
            _ => 0,
        };
        if self.grid_nodes < min_nodes {
            return Err(CliError::Validation(format!(
                "grid-nodes must be at least {min_nodes} for {}",
                self.command.name()
            )));
        }
        if self.command == Command::VerifyInteraction && self.n_max < 3 {
            return Err(CliError::Validation(
                "verify-interaction compares n-max with n-max - 1 and needs n-max >= 3".into(),
            ));
        }
        for (name, v) in [
            ("omega-a", self.omega_a),
            ("omega-b", self.omega_b),
            ("omega-c", self.omega_c),
        ] {
            check_range(name, v, v.is_finite(), "must be finite")?;
        }
        if self.command == Command::PlanFrequencies && self.omega_a >= self.omega_b {
            return Err(CliError::Validation("omega-a must be below omega-b".into()));
        }
        Ok(())
    }

    pub fn w(&self) -> c64 {
        c64::new(self.w_re, self.w_im)
    }

    /// State measured by the density and sampling commands. A single entry in
    /// `n_bars` selects the optimal split at that photon number, with phase `arg w`.
    pub fn state_params(&self) -> Result<DisplacedTwinBeamParams, CliError> {
        let p = match self.n_bars.as_slice() {
            [n] if self.command == Command::PhaseDensity => optimal_split(*n, self.w().arg())?,
            _ => DisplacedTwinBeamParams::new(self.lambda, self.w())?,
        };
        Ok(p)
    }
}

/// Photons added to the state's own cutoff: the truncated current distorts
/// the outcome operators near the Fock boundary, and a dozen extra levels
/// bring that error from about 1e-4 to below 1e-6.
pub const DETECTOR_MARGIN: usize = 12;

fn default_n_max(
    command: Command,
    lambda: f64,
    w: c64,
    n_bars: &[f64],
    eta: f64,
) -> Result<usize, CliError> {
    Ok(match command {
        Command::VerifyInteraction => 5,
        Command::CompletenessCheck => 24,
        // unused; the sweep picks its own cutoffs
        Command::Sensitivity | Command::PlanFrequencies => 0,
        // finite efficiency runs on the dense path
        Command::Measure | Command::Repeat if eta < 1.0 => 10,
        Command::PhaseDensity if n_bars.len() == 1 => {
            optimal_split(n_bars[0], w.arg())?.default_n_max() + DETECTOR_MARGIN
        }
        _ => DisplacedTwinBeamParams::new(lambda, w)?.default_n_max() + DETECTOR_MARGIN,
    })
}

fn check_range(name: &str, value: f64, ok: bool, reason: &str) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{name} = {value}: {reason}")))
    }
}
