//! One function per subcommand, each producing a `Report`.

use std::f64::consts::PI;

use hetphase_core::experiments::{completeness_deviation, sensitivity_sweep};
use hetphase_core::interaction::{
    plan_frequencies, surviving_terms, DEFAULT_FREQUENCY_TOL, HEISENBERG_RESIDUAL_BOUND,
};
use hetphase_core::povm::{closed_form_density, gaussian_phase_density};
use hetphase_core::twinbeam::displaced_twin_beams;
use hetphase_core::{
    c64, delta_sq, CutoffGrowth, DensityOperator, DetectorParams, FourModeSystem, Heterodyne,
    InteractionModel, KetHeterodyne, KetSampler, KetState, MeasurementRecord, OutcomeSampler,
    RadialGrid, SamplerSpec, Truncation, TruncationPolicy,
};
use serde_json::{json, Value};

use crate::config::{Command, RunConfig};
use crate::error::CliError;
use crate::output::{Cell, Report, Table};

/// Outcome of a command: the report, plus a failure to raise after the
/// report has been written.
pub struct Executed {
    pub report: Report,
    pub failure: Option<CliError>,
}

impl From<Report> for Executed {
    fn from(report: Report) -> Self {
        Executed {
            report,
            failure: None,
        }
    }
}

pub const INDIRECT_TOLERANCE: f64 = 1e-2;
pub const COMPLETENESS_TOLERANCE: f64 = 1e-3;

pub fn execute(cfg: &RunConfig) -> Result<Executed, CliError> {
    match cfg.command {
        Command::ProbDensity => prob_density(cfg).map(Into::into),
        Command::PhaseDensity => phase_density(cfg).map(Into::into),
        Command::Measure | Command::Repeat => sequence(cfg).map(Into::into),
        Command::Sensitivity => sensitivity(cfg).map(Into::into),
        Command::VerifyInteraction => verify_interaction(cfg),
        Command::PlanFrequencies => plan(cfg),
        Command::CompletenessCheck => completeness(cfg),
    }
}

fn detector(cfg: &RunConfig) -> Result<DetectorParams, CliError> {
    Ok(DetectorParams::new(cfg.det_lambda, cfg.eta)?)
}

fn state(cfg: &RunConfig) -> Result<KetState, CliError> {
    let params = cfg.state_params()?;
    Ok(displaced_twin_beams(
        &params,
        &Truncation::new(cfg.n_max, 2)?,
    )?)
}

/// Total variance of the outcome for the configured displaced twin beam.
fn outcome_variance(cfg: &RunConfig, det: &DetectorParams) -> Result<f64, CliError> {
    Ok(delta_sq(cfg.state_params()?.lambda(), 1.0) + det.delta_sq())
}

fn axis(center: f64, half: f64, nodes: usize) -> Vec<f64> {
    if nodes == 1 {
        return vec![center];
    }
    (0..nodes)
        .map(|i| center - half + 2.0 * half * i as f64 / (nodes - 1) as f64)
        .collect()
}

fn prob_density(cfg: &RunConfig) -> Result<Report, CliError> {
    let det = detector(cfg)?;
    let params = cfg.state_params()?;
    let sigma_sq = outcome_variance(cfg, &det)?;
    let half = cfg.grid_halfwidth * (sigma_sq / 2.0).sqrt();
    let w = params.w;
    let xs = axis(w.re, half, cfg.grid_nodes);
    let ys = axis(w.im, half, cfg.grid_nodes);

    let (psi, het) = if cfg.closed_form {
        (None, None)
    } else {
        let psi = state(cfg)?;
        let het = KetHeterodyne::new(det, *psi.truncation())?;
        (Some(psi), Some(het))
    };

    let mut table = Table::new(vec!["z_re", "z_im", "density"]);
    let mut mass = 0.0;
    let mut max_dev = 0.0_f64;
    for &x in &xs {
        for &y in &ys {
            let z = c64::new(x, y);
            let exact = closed_form_density(w, params.lambda(), z, &det);
            let p = match (&psi, &het) {
                (Some(psi), Some(het)) => het.outcome_density(psi, z)?,
                _ => exact,
            };
            max_dev = max_dev.max((p - exact).abs());
            mass += p;
            table.push(vec![x.into(), y.into(), p.into()]);
        }
    }
    let cell = if cfg.grid_nodes > 1 {
        (2.0 * half / (cfg.grid_nodes - 1) as f64).powi(2)
    } else {
        0.0
    };
    Ok(Report {
        table,
        extra: None,
        diagnostics: json!({
            "tail_mass": psi.as_ref().map(|p| p.discarded_mass()).unwrap_or(0.0),
            "cell_area": cell,
            "grid_mass": mass * cell,
            "outcome_variance": sigma_sq,
            "max_abs_deviation_from_closed_form": max_dev,
        }),
    })
}

fn wrap(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y <= -PI {
        y + 2.0 * PI
    } else {
        y
    }
}

fn phase_density(cfg: &RunConfig) -> Result<Report, CliError> {
    let det = detector(cfg)?;
    let params = cfg.state_params()?;
    let w = params.w;
    let sigma_sq = outcome_variance(cfg, &det)?;
    let n = cfg.grid_nodes;
    let angles: Vec<f64> = (0..n)
        .map(|k| -PI + 2.0 * PI * k as f64 / n as f64)
        .collect();

    let (densities, tail) = if cfg.closed_form {
        (
            angles
                .iter()
                .map(|&phi| gaussian_phase_density(w, sigma_sq, phi))
                .collect::<Vec<_>>(),
            0.0,
        )
    } else {
        let psi = state(cfg)?;
        let het = KetHeterodyne::new(det, *psi.truncation())?;
        let s = (sigma_sq / 2.0).sqrt();
        let r_lo = (w.norm() - cfg.grid_halfwidth * s).max(0.0);
        let r_hi = w.norm() + cfg.grid_halfwidth * s;
        let grid = RadialGrid {
            r_min: r_lo,
            r_max: r_hi,
            panels: ((r_hi - r_lo) / (2.0 * s)).ceil().max(1.0) as usize,
            order: 8,
        };
        (
            het.phase_densities(&psi, &grid, &angles)?,
            psi.discarded_mass(),
        )
    };

    let dphi = 2.0 * PI / n as f64;
    let mass: f64 = densities.iter().sum::<f64>() * dphi;
    let first: c64 = angles
        .iter()
        .zip(&densities)
        .map(|(&phi, &p)| c64::from_polar(p, phi))
        .sum();
    let center = first.arg();
    let second: f64 = angles
        .iter()
        .zip(&densities)
        .map(|(&phi, &p)| p * wrap(phi - center).powi(2))
        .sum::<f64>()
        * dphi;
    let width = (second / mass).sqrt();

    let mut table = Table::new(vec!["phi", "density"]);
    for (phi, p) in angles.iter().zip(&densities) {
        table.push(vec![(*phi).into(), (*p).into()]);
    }
    let gaussian_width = if w.norm() > 0.0 {
        Value::from((sigma_sq / (2.0 * w.norm_sqr())).sqrt())
    } else {
        Value::Null
    };
    Ok(Report {
        table,
        extra: None,
        diagnostics: json!({
            "tail_mass": tail,
            "curve_mass": mass,
            "fitted_center": center,
            "fitted_width": width,
            "gaussian_width": gaussian_width,
            "state_lambda": params.lambda(),
            "w_re": w.re,
            "w_im": w.im,
        }),
    })
}

fn sequence(cfg: &RunConfig) -> Result<Report, CliError> {
    if cfg.command == Command::Repeat && cfg.samples != 1 {
        return Err(CliError::Validation(
            "repeat runs one sequence; use measure for independent samples".into(),
        ));
    }
    let det = detector(cfg)?;
    let psi0 = state(cfg)?;
    let spec = SamplerSpec {
        grid_halfwidth_sigmas: cfg.grid_halfwidth,
        nodes_per_axis: cfg.grid_nodes,
        seed: cfg.seed,
    };
    let mut records: Vec<MeasurementRecord> = Vec::with_capacity(cfg.samples);
    let mut final_cutoff = cfg.n_max;
    let mut final_boundary = 0.0f64;
    if det.is_ideal() {
        let sampler = KetSampler::new(det, spec)?.with_growth(CutoffGrowth::default())?;
        for stream in 0..cfg.samples as u64 {
            let (rec, last) = sampler.run_sequence_with_state(&psi0, cfg.steps, stream)?;
            final_cutoff = final_cutoff.max(last.truncation().n_max());
            final_boundary = final_boundary.max(last.boundary_mass());
            records.push(rec);
        }
    } else {
        let sampler = OutcomeSampler::new(Heterodyne::new(det, *psi0.truncation())?, spec)?;
        let rho0 = psi0.to_density();
        for stream in 0..cfg.samples as u64 {
            let (rec, last) = sampler.run_sequence_with_state(&rho0, cfg.steps, stream)?;
            final_boundary = final_boundary.max(last.boundary_mass());
            records.push(rec);
        }
    }
    let mut table = Table::new(vec!["step", "z_re", "z_im", "purity"]);
    for rec in &records {
        for (i, (o, p)) in rec.outcomes.iter().zip(&rec.purities).enumerate() {
            table.push(vec![
                (i + 1).into(),
                o.z.re.into(),
                o.z.im.into(),
                (*p).into(),
            ]);
        }
    }
    Ok(Report {
        table,
        extra: None,
        diagnostics: json!({
            "tail_mass": psi0.discarded_mass(),
            "initial_n_max": cfg.n_max,
            "final_n_max": final_cutoff,
            "final_boundary_mass": final_boundary,
            "path": if det.is_ideal() { "ket" } else { "density-matrix" },
            "delta_sq": det.delta_sq(),
        }),
    })
}

fn sensitivity(cfg: &RunConfig) -> Result<Report, CliError> {
    let points = sensitivity_sweep(&cfg.n_bars, cfg.eta, &TruncationPolicy::default())?;
    let mut table = Table::new(vec!["n_bar", "lambda", "w_mod_sq", "delta_phi", "product"]);
    for p in &points {
        table.push(vec![
            p.n_bar.into(),
            p.lambda.into(),
            p.w_mod_sq.into(),
            p.delta_phi.into(),
            p.product.into(),
        ]);
    }
    let tail = points.iter().map(|p| p.tail_mass).fold(0.0, f64::max);
    let per_point: Vec<Value> = points
        .iter()
        .map(|p| {
            json!({
                "n_bar": p.n_bar,
                "n_max": p.n_max,
                "tail_mass": p.tail_mass,
                "n_bar_exact": p.n_bar_exact,
                "product_exact": p.product_exact,
            })
        })
        .collect();
    Ok(Report {
        table,
        extra: None,
        diagnostics: json!({ "tail_mass": tail, "points": per_point }),
    })
}

fn mu_suite() -> Vec<c64> {
    vec![
        c64::new(0.0, 0.0),
        c64::new(1.0, 0.0),
        c64::new(0.0, 1.0),
        c64::from_polar(1.0, PI / 4.0),
        c64::new(0.5, 0.0),
    ]
}

const PROBES: [(&str, [usize; 2]); 2] = [("vacuum", [0, 0]), ("one-photon", [1, 0])];

fn verify_interaction(cfg: &RunConfig) -> Result<Executed, CliError> {
    let top = cfg.n_max;
    let mut table = Table::new(vec!["state", "mu_re", "mu_im", "n_max", "residual"]);
    let mut residuals: Vec<(usize, usize, usize, f64)> = Vec::new();
    let mut top_model = None;
    for n in [top - 1, top] {
        let model = InteractionModel::new(FourModeSystem::new(n)?)?;
        let t = *model.system().truncation();
        for (si, (name, occ)) in PROBES.iter().enumerate() {
            let psi = KetState::basis(t, &[occ[0], occ[1], 0, 0])?;
            for (mi, mu) in mu_suite().into_iter().enumerate() {
                let r = model.heisenberg_shift_residual(&psi, mu)?;
                residuals.push((si, mi, n, r));
                table.push(vec![
                    (*name).into(),
                    mu.re.into(),
                    mu.im.into(),
                    n.into(),
                    r.into(),
                ]);
            }
        }
        top_model = Some(model);
    }
    let model = top_model.expect("two cutoffs evaluated");

    let mut problems = Vec::new();
    for &(si, mi, n, r) in residuals.iter().filter(|x| x.2 == top) {
        let below = residuals
            .iter()
            .find(|x| x.0 == si && x.1 == mi && x.2 == top - 1)
            .map(|x| x.3)
            .unwrap_or(f64::INFINITY);
        if r > 1.1 * below && r > 1e-12 {
            problems.push(format!(
                "{} mu#{mi}: residual grows from {below:e} to {r:e}",
                PROBES[si].0
            ));
        }
        if n >= 5 && r > HEISENBERG_RESIDUAL_BOUND {
            problems.push(format!(
                "{} mu#{mi}: residual {r:e} above {HEISENBERG_RESIDUAL_BOUND:e}",
                PROBES[si].0
            ));
        }
    }

    let pair = Truncation::new(top, 2)?;
    let mut indirect = Vec::new();
    let mut boundary = 0.0_f64;
    for (name, occ) in PROBES {
        let rho: DensityOperator = KetState::basis(pair, &occ)?.to_density();
        let rep = model.indirect_measurement_check(&rho, cfg.det_lambda)?;
        if rep.discrepancy > INDIRECT_TOLERANCE {
            problems.push(format!(
                "{name}: indirect discrepancy {:e}",
                rep.discrepancy
            ));
        }
        boundary = boundary.max(rep.boundary_mass);
        indirect.push(json!({
            "state": name,
            "evolved": {
                "mean": [rep.evolved.mean.re, rep.evolved.mean.im],
                "modulus_sq": rep.evolved.modulus_sq,
                "square": [rep.evolved.square.re, rep.evolved.square.im],
            },
            "predicted": {
                "mean": [rep.predicted.mean.re, rep.predicted.mean.im],
                "modulus_sq": rep.predicted.modulus_sq,
                "square": [rep.predicted.square.re, rep.predicted.square.im],
            },
            "discrepancy": rep.discrepancy,
            "boundary_mass": rep.boundary_mass,
        }));
    }

    let passed = problems.is_empty();
    let report = Report {
        table,
        extra: Some(json!({ "indirect": indirect })),
        diagnostics: json!({
            "tail_mass": boundary,
            "residual_bound": HEISENBERG_RESIDUAL_BOUND,
            "indirect_tolerance": INDIRECT_TOLERANCE,
            "indirect": indirect,
            "passed": passed,
            "problems": problems,
        }),
    };
    let failure = (!passed).then(|| CliError::Numerical(problems.join("; ")));
    Ok(Executed { report, failure })
}

fn plan(cfg: &RunConfig) -> Result<Executed, CliError> {
    let plan = plan_frequencies(cfg.omega_a, cfg.omega_b, cfg.omega_c, DEFAULT_FREQUENCY_TOL)?;
    let mut table = Table::new(vec!["kind", "name", "value"]);
    for (name, v) in [
        ("omega_a", plan.omega_a),
        ("omega_b", plan.omega_b),
        ("omega_c", plan.omega_c),
        ("omega_d", plan.omega_d),
        ("omega_xi", plan.omega_xi),
        ("omega_gamma", plan.omega_gamma),
    ] {
        table.push(vec!["frequency".into(), name.into(), v.into()]);
    }
    for c in &plan.restriction_checks {
        table.push(vec![
            "restriction".into(),
            c.name.clone().into(),
            c.passed.into(),
        ]);
    }
    // Each term is listed once; its Hermitian conjugate is implied.
    let terms = surviving_terms(&plan);
    let listed: Vec<String> = terms
        .iter()
        .filter(|t| **t <= t.adjoint())
        .map(|t| t.to_string())
        .collect();
    for t in &listed {
        table.push(vec![
            "term".into(),
            t.clone().into(),
            Cell::Text("+ h.c.".into()),
        ]);
    }
    let failed: Vec<String> = plan.failed().iter().map(|s| s.to_string()).collect();
    let report = Report {
        table,
        extra: Some(json!({
            "valid": plan.is_valid(),
            "failed_checks": failed,
            "surviving_terms": listed,
        })),
        diagnostics: json!({
            "tail_mass": 0.0,
            "tolerance": plan.tolerance,
            "valid": plan.is_valid(),
            "failed_checks": failed,
        }),
    };
    let failure = (!plan.is_valid()).then(|| CliError::InvalidPlan(failed.join(", ")));
    Ok(Executed { report, failure })
}

fn completeness(cfg: &RunConfig) -> Result<Executed, CliError> {
    let det = detector(cfg)?;
    let het = Heterodyne::new(det, Truncation::new(cfg.n_max, 2)?)?;
    let r_max = het.current().norm_bound() + cfg.grid_halfwidth * det.delta_sq().sqrt();
    let grid = RadialGrid::single(r_max, cfg.grid_nodes);
    let c = het.phase_marginal(&grid)?.completeness();
    let block = cfg.n_max / 2;
    let t = het.truncation();
    let mut table = Table::new(vec!["n_a", "n_b", "diagonal", "deviation"]);
    for na in 0..=block {
        for nb in 0..=block {
            let i = t.index(&[na, nb])?;
            table.push(vec![
                na.into(),
                nb.into(),
                c[(i, i)].into(),
                (c[(i, i)] - 1.0).abs().into(),
            ]);
        }
    }
    let worst = completeness_deviation(&het, &grid, block)?;
    let passed = worst <= COMPLETENESS_TOLERANCE;
    let report = Report {
        table,
        extra: None,
        diagnostics: json!({
            "tail_mass": 0.0,
            "block": block,
            "r_max": r_max,
            "max_deviation": worst,
            "tolerance": COMPLETENESS_TOLERANCE,
            "passed": passed,
        }),
    };
    let failure = (!passed).then(|| {
        CliError::Numerical(format!(
            "completeness deviation {worst:e} above {COMPLETENESS_TOLERANCE:e}"
        ))
    });
    Ok(Executed { report, failure })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_into_principal_interval() {
        assert!((wrap(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
        assert_eq!(wrap(PI), PI);
        assert_eq!(wrap(-PI), PI);
    }

    #[test]
    fn axis_with_one_node_is_center() {
        assert_eq!(axis(1.5, 3.0, 1), vec![1.5]);
        assert_eq!(axis(0.0, 1.0, 3), vec![-1.0, 0.0, 1.0]);
    }
}
