//! Monte Carlo outcome sampling, repeated measurements and the phase
//! sensitivity sweep.

use std::f64::consts::PI;
use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::c64;
use crate::error::{invalid, Error, Result};
use crate::fock::{DensityOperator, KetState, Truncation};
use crate::krylov::KetHeterodyne;
use crate::povm::{
    delta_sq, gaussian_phase_density, DetectorParams, Heterodyne, HeterodyneOutcome,
    QuadratureGrid, RadialGrid, SectorSeries,
};
use crate::twinbeam::{displaced_twin_beams, mean_photons_closed_form, optimal_split};

/// Grid mass allowed on the boundary cells of a sampling window.
pub const SAMPLER_BOUNDARY_MASS: f64 = 1e-6;
/// Times a sampling window may be enlarged after a failed coverage check.
pub const MAX_WIDENINGS: usize = 4;
/// Growth of the window half-width per widening.
pub const WIDENING_FACTOR: f64 = 1.25;

/// Discretization of the outcome density used for sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub grid_halfwidth_sigmas: f64,
    pub nodes_per_axis: usize,
    pub seed: u64,
}

impl SamplerSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            grid_halfwidth_sigmas: 6.0,
            nodes_per_axis: 201,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes_per_axis < 21 || self.nodes_per_axis % 2 == 0 {
            return Err(invalid(
                "nodes_per_axis",
                self.nodes_per_axis as f64,
                "must be odd and at least 21",
            ));
        }
        if !(self.grid_halfwidth_sigmas > 0.0) || !self.grid_halfwidth_sigmas.is_finite() {
            return Err(invalid(
                "grid_halfwidth_sigmas",
                self.grid_halfwidth_sigmas,
                "must be positive",
            ));
        }
        Ok(())
    }

    /// Independent generator for stream `stream` under this seed.
    pub fn rng(&self, stream: u64) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self::new(0)
    }
}

/// Outcomes and post-measurement purities of a repeated-measurement run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub outcomes: Vec<HeterodyneOutcome>,
    pub purities: Vec<f64>,
    pub params: DetectorParams,
    pub seed: u64,
}

impl MeasurementRecord {
    /// `|z_{j+1} - z_j|` for consecutive outcomes.
    pub fn steps(&self) -> Vec<f64> {
        self.outcomes
            .windows(2)
            .map(|w| (w[1].z - w[0].z).norm())
            .collect()
    }
}

/// Phase spread at one point of the optimal family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityPoint {
    pub n_bar: f64,
    pub eta: f64,
    pub lambda: f64,
    pub w_mod_sq: f64,
    pub delta_phi: f64,
    pub product: f64,
    /// Mean photon number of the state including the twin-beam part.
    pub n_bar_exact: f64,
    /// `delta_phi * n_bar_exact`
    pub product_exact: f64,
    pub n_max: usize,
    pub tail_mass: f64,
}

/// Polar window in which the outcome density is tabulated.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Window {
    r_lo: f64,
    r_hi: f64,
    phi_lo: f64,
    phi_hi: f64,
    full_circle: bool,
}

impl Window {
    /// Window spanning `halfwidth` standard deviations of the outcome
    /// distribution, estimated from the moments `<Z>`, `<Z^dag Z>`, `<Z^2>`.
    fn around(moments: (c64, f64, c64), delta_sq: f64, halfwidth: f64) -> Self {
        let (c, m2, msq) = moments;
        let spread = (m2 - c.norm_sqr()).max(0.0) + delta_sq;
        let skew = (msq - c * c).norm();
        // Largest principal variance of the two outcome quadratures.
        let sigma = (0.5 * (spread + skew)).sqrt();
        let half = halfwidth * sigma;
        let rc = c.norm();
        if rc > half * 1.05 {
            let alpha = (half / rc).asin();
            Self {
                r_lo: rc - half,
                r_hi: rc + half,
                phi_lo: c.arg() - alpha,
                phi_hi: c.arg() + alpha,
                full_circle: false,
            }
        } else {
            Self {
                r_lo: 0.0,
                r_hi: rc + half,
                phi_lo: -PI,
                phi_hi: PI,
                full_circle: true,
            }
        }
    }
}

/// Builds the sampling grid from a ring evaluator `ring(r, angles)`.
///
/// Truncated states can have heavier tails than their moments suggest, so
/// the window is widened by `WIDENING_FACTOR` up to `MAX_WIDENINGS` times before the
/// coverage check is allowed to fail.
fn tabulate<F>(
    spec: &SamplerSpec,
    delta_sq: f64,
    moments: (c64, f64, c64),
    mut ring: F,
) -> Result<DensityGrid>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let mut widen = 1.0;
    let mut attempt = 0;
    loop {
        let win = Window::around(moments, delta_sq, widen * spec.grid_halfwidth_sigmas);
        match DensityGrid::build(win, spec.nodes_per_axis, &mut ring) {
            Err(Error::QuadratureCoverage { .. }) if attempt < MAX_WIDENINGS => {
                attempt += 1;
                widen *= WIDENING_FACTOR;
            }
            other => return other,
        }
    }
}

/// Density tabulated on a polar grid, with cell masses for inverse-CDF sampling.
#[derive(Debug, Clone)]
pub struct DensityGrid {
    radii: Vec<f64>,
    angles: Vec<f64>,
    /// `P(r_i, phi_j)`, row-major in `i`.
    values: Vec<f64>,
    /// Cumulative cell masses, row-major in the radial cell index.
    cumulative: Vec<f64>,
    total_mass: f64,
    boundary_mass: f64,
}

impl DensityGrid {
    fn build<F>(win: Window, n: usize, ring: &mut F) -> Result<Self>
    where
        F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
    {
        let radii: Vec<f64> = (0..n)
            .map(|i| win.r_lo + (win.r_hi - win.r_lo) * i as f64 / (n - 1) as f64)
            .collect();
        let angles: Vec<f64> = (0..n)
            .map(|j| win.phi_lo + (win.phi_hi - win.phi_lo) * j as f64 / (n - 1) as f64)
            .collect();
        let mut values = Vec::with_capacity(n * n);
        for &r in &radii {
            values.extend(ring(r, &angles)?);
        }

        let (hr, hp) = (radii[1] - radii[0], angles[1] - angles[0]);
        let mut cumulative = Vec::with_capacity((n - 1) * (n - 1));
        let mut total = 0.0;
        let mut boundary = 0.0;
        for i in 0..n - 1 {
            for j in 0..n - 1 {
                let g = |a: usize, b: usize| (radii[a] * values[a * n + b]).max(0.0);
                let m = 0.25 * hr * hp * (g(i, j) + g(i + 1, j) + g(i, j + 1) + g(i + 1, j + 1));
                total += m;
                cumulative.push(total);
                let radial_edge = i == n - 2 || (i == 0 && win.r_lo > 0.0);
                let angular_edge = !win.full_circle && (j == 0 || j == n - 2);
                if radial_edge || angular_edge {
                    boundary += m;
                }
            }
        }
        if !(total > 0.0) {
            return Err(Error::InvalidState(
                "outcome density vanishes on the sampling grid".into(),
            ));
        }
        let grid = Self {
            radii,
            angles,
            values,
            cumulative,
            total_mass: total,
            boundary_mass: boundary,
        };
        if grid.boundary_fraction() > SAMPLER_BOUNDARY_MASS {
            return Err(Error::QuadratureCoverage {
                coverage: 1.0 - grid.boundary_fraction(),
                required: 1.0 - SAMPLER_BOUNDARY_MASS,
            });
        }
        Ok(grid)
    }

    fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.angles.len() + j]
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    /// Share of the grid mass on cells that touch the window's edge.
    pub fn boundary_fraction(&self) -> f64 {
        self.boundary_mass / self.total_mass
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    /// Probability that the outcome lands in cells with `|z| <= r`, a CDF
    /// usable for goodness-of-fit checks.
    pub fn radial_cdf(&self, r: f64) -> f64 {
        let na = self.angles.len() - 1;
        let mut acc = 0.0;
        for i in 0..self.radii.len() - 1 {
            let (r0, r1) = (self.radii[i], self.radii[i + 1]);
            if r0 >= r {
                break;
            }
            let frac = ((r - r0) / (r1 - r0)).min(1.0);
            let row = &self.cumulative[i * na..(i + 1) * na];
            let prev = if i == 0 {
                0.0
            } else {
                self.cumulative[i * na - 1]
            };
            let cell_row = row[na - 1] - prev;
            // Linear-in-r density within the cell: integrate the bilinear form.
            let (g0, g1) = self.ring_weights(i);
            let part = if g0 + g1 > 0.0 {
                (g0 * frac + 0.5 * (g1 - g0) * frac * frac) / (0.5 * (g0 + g1))
            } else {
                frac
            };
            acc += cell_row * part;
        }
        acc / self.total_mass
    }

    fn ring_weights(&self, i: usize) -> (f64, f64) {
        let na = self.angles.len();
        let (r0, r1) = (self.radii[i], self.radii[i + 1]);
        let mut g0 = 0.0;
        let mut g1 = 0.0;
        for j in 0..na - 1 {
            g0 += r0 * (self.value(i, j) + self.value(i, j + 1));
            g1 += r1 * (self.value(i + 1, j) + self.value(i + 1, j + 1));
        }
        (g0, g1)
    }

    /// Bilinearly interpolated density at a point inside cell `(i, j)`.
    fn interpolate(&self, i: usize, j: usize, s: f64, t: f64) -> f64 {
        (1.0 - s) * (1.0 - t) * self.value(i, j)
            + s * (1.0 - t) * self.value(i + 1, j)
            + (1.0 - s) * t * self.value(i, j + 1)
            + s * t * self.value(i + 1, j + 1)
    }

    /// Draws one outcome from the bilinear interpolant of `r P(r, phi)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> HeterodyneOutcome {
        let na = self.angles.len() - 1;
        let u: f64 = rng.random::<f64>() * self.total_mass;
        let cell = self
            .cumulative
            .partition_point(|&c| c <= u)
            .min(self.cumulative.len() - 1);
        let (i, j) = (cell / na, cell % na);
        let (r0, r1) = (self.radii[i], self.radii[i + 1]);
        let (p0, p1) = (self.angles[j], self.angles[j + 1]);
        let g00 = (r0 * self.value(i, j)).max(0.0);
        let g10 = (r1 * self.value(i + 1, j)).max(0.0);
        let g01 = (r0 * self.value(i, j + 1)).max(0.0);
        let g11 = (r1 * self.value(i + 1, j + 1)).max(0.0);
        let s = sample_linear(0.5 * (g00 + g01), 0.5 * (g10 + g11), rng.random());
        let t = sample_linear(
            (1.0 - s) * g00 + s * g10,
            (1.0 - s) * g01 + s * g11,
            rng.random(),
        );
        let r = r0 + s * (r1 - r0);
        let phi = p0 + t * (p1 - p0);
        let z = c64::from_polar(r, phi);
        HeterodyneOutcome::new(z, self.interpolate(i, j, s, t).max(0.0))
    }
}

/// Inverse CDF of the density proportional to `a (1 - x) + b x` on `[0, 1]`.
fn sample_linear(a: f64, b: f64, u: f64) -> f64 {
    let diff = b - a;
    let scale = a.abs().max(b.abs());
    if scale == 0.0 || diff.abs() <= 1e-12 * scale {
        return u;
    }
    let disc = (a * a + diff * u * (a + b)).max(0.0);
    // Rationalized root, stable when `diff` is small.
    let x = u * (a + b) / (a + disc.sqrt());
    x.clamp(0.0, 1.0)
}

/// Outcome sampler bound to one instrument.
#[derive(Debug, Clone)]
pub struct OutcomeSampler {
    het: Heterodyne,
    spec: SamplerSpec,
}

impl OutcomeSampler {
    pub fn new(het: Heterodyne, spec: SamplerSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { het, spec })
    }

    pub fn instrument(&self) -> &Heterodyne {
        &self.het
    }

    pub fn spec(&self) -> &SamplerSpec {
        &self.spec
    }

    /// Tabulates `P(z)` on the polar window around the state's centroid.
    pub fn density_grid(&self, rho: &DensityOperator) -> Result<DensityGrid> {
        let cur = self.het.current();
        let moments = (
            cur.mean(rho)?,
            cur.mean_modulus_sq(rho)?,
            cur.mean_square(rho)?,
        );
        tabulate(
            &self.spec,
            self.het.detector().delta_sq(),
            moments,
            |r, angles| {
                let series: SectorSeries = self.het.radial_density(rho, r)?;
                Ok(angles.iter().map(|&phi| series.eval(phi)).collect())
            },
        )
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        rho: &DensityOperator,
        rng: &mut R,
    ) -> Result<HeterodyneOutcome> {
        Ok(self.density_grid(rho)?.sample(rng))
    }

    /// Alternates sampling and reduction `k` times starting from `rho0`.
    pub fn run_sequence(&self, rho0: &DensityOperator, k: usize) -> Result<MeasurementRecord> {
        self.run_sequence_stream(rho0, k, 0)
    }

    /// As `run_sequence`, drawing from RNG stream `stream`.
    pub fn run_sequence_stream(
        &self,
        rho0: &DensityOperator,
        k: usize,
        stream: u64,
    ) -> Result<MeasurementRecord> {
        Ok(self.run_sequence_with_state(rho0, k, stream)?.0)
    }

    /// As `run_sequence_stream`, also returning the final state.
    pub fn run_sequence_with_state(
        &self,
        rho0: &DensityOperator,
        k: usize,
        stream: u64,
    ) -> Result<(MeasurementRecord, DensityOperator)> {
        if k == 0 {
            return Err(invalid("k", 0.0, "at least one measurement is required"));
        }
        let mut rng = self.spec.rng(stream);
        let mut rho = rho0.clone();
        let mut outcomes = Vec::with_capacity(k);
        let mut purities = Vec::with_capacity(k);
        let quad = QuadratureGrid::default();
        for _ in 0..k {
            let drawn = self.sample(&rho, &mut rng)?;
            let res = if self.het.detector().is_ideal() {
                self.het.reduce_state(&rho, drawn.z)?
            } else {
                self.het.reduce_state_eta(&rho, drawn.z, &quad)?
            };
            outcomes.push(res.outcome);
            purities.push(res.purity);
            rho = res.state;
        }
        let record = MeasurementRecord {
            outcomes,
            purities,
            params: *self.het.detector(),
            seed: self.spec.seed,
        };
        Ok((record, rho))
    }
}

/// Cutoff growth for long pure-state sequences. Each reduction narrows the
/// current, which pushes weight to higher photon numbers, so a fixed cutoff
/// eventually clips the state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutoffGrowth {
    /// Enlarge once the weight on the cutoff shell exceeds this.
    pub max_boundary_mass: f64,
    pub step: usize,
    pub n_max_limit: usize,
}

impl Default for CutoffGrowth {
    fn default() -> Self {
        Self {
            max_boundary_mass: 1e-10,
            step: 10,
            n_max_limit: 160,
        }
    }
}

/// Sampler for pure states on large truncations, using the matrix-free
/// instrument. Reduction keeps the state pure, so recorded purities are
/// `|<psi|psi>|^2` of the normalized ket.
#[derive(Debug, Clone)]
pub struct KetSampler {
    det: DetectorParams,
    spec: SamplerSpec,
    growth: Option<CutoffGrowth>,
}

impl KetSampler {
    pub fn new(det: DetectorParams, spec: SamplerSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            det,
            spec,
            growth: None,
        })
    }

    pub fn with_growth(mut self, growth: CutoffGrowth) -> Result<Self> {
        if !(growth.max_boundary_mass > 0.0) || growth.step == 0 {
            return Err(invalid(
                "max_boundary_mass",
                growth.max_boundary_mass,
                "growth needs a positive threshold and step",
            ));
        }
        self.growth = Some(growth);
        Ok(self)
    }

    pub fn detector(&self) -> &DetectorParams {
        &self.det
    }

    pub fn density_grid(&self, psi: &KetState) -> Result<DensityGrid> {
        let het = KetHeterodyne::new(self.det, *psi.truncation())?;
        self.grid_with(&het, psi)
    }

    fn grid_with(&self, het: &KetHeterodyne, psi: &KetState) -> Result<DensityGrid> {
        let moments = het.current().moments(psi.amplitudes());
        tabulate(&self.spec, self.det.delta_sq(), moments, |r, angles| {
            het.ring_densities(psi, r, angles)
        })
    }

    fn grow(&self, psi: KetState) -> Result<KetState> {
        let Some(g) = self.growth else {
            return Ok(psi);
        };
        let mut psi = psi;
        while psi.boundary_mass() > g.max_boundary_mass {
            let n = psi.truncation().n_max();
            if n >= g.n_max_limit {
                return Err(Error::TruncationTooSmall(format!(
                    "boundary mass {:.3e} at the cutoff limit n_max = {n}",
                    psi.boundary_mass()
                )));
            }
            let t = Truncation::new((n + g.step).min(g.n_max_limit), psi.truncation().n_modes())?;
            psi = psi.embed_into(t)?;
        }
        Ok(psi)
    }

    pub fn run_sequence_stream(
        &self,
        psi0: &KetState,
        k: usize,
        stream: u64,
    ) -> Result<MeasurementRecord> {
        Ok(self.run_sequence_with_state(psi0, k, stream)?.0)
    }

    /// As `run_sequence_stream`, also returning the final state, whose
    /// truncation shows how far the cutoff grew.
    pub fn run_sequence_with_state(
        &self,
        psi0: &KetState,
        k: usize,
        stream: u64,
    ) -> Result<(MeasurementRecord, KetState)> {
        if k == 0 {
            return Err(invalid("k", 0.0, "at least one measurement is required"));
        }
        let mut rng = self.spec.rng(stream);
        let mut psi = self.grow(psi0.clone())?;
        let mut outcomes = Vec::with_capacity(k);
        let mut purities = Vec::with_capacity(k);
        for _ in 0..k {
            let het = KetHeterodyne::new(self.det, *psi.truncation())?;
            let drawn = self.grid_with(&het, &psi)?.sample(&mut rng);
            let (next, outcome) = het.reduce(&psi, drawn.z)?;
            psi = self.grow(next)?;
            outcomes.push(outcome);
            purities.push(psi.norm_sqr().powi(2));
        }
        let record = MeasurementRecord {
            outcomes,
            purities,
            params: self.det,
            seed: self.spec.seed,
        };
        Ok((record, psi))
    }
}

pub fn sample_outcome<R: Rng + ?Sized>(
    rho: &DensityOperator,
    det: &DetectorParams,
    spec: &SamplerSpec,
    rng: &mut R,
) -> Result<HeterodyneOutcome> {
    let het = Heterodyne::new(*det, *rho.truncation())?;
    OutcomeSampler::new(het, *spec)?.sample(rho, rng)
}

pub fn run_sequence(
    rho0: &DensityOperator,
    k: usize,
    det: &DetectorParams,
    spec: &SamplerSpec,
) -> Result<MeasurementRecord> {
    let het = Heterodyne::new(*det, *rho0.truncation())?;
    OutcomeSampler::new(het, *spec)?.run_sequence(rho0, k)
}

/// RMS of `|z_{j+1} - z_j|` expected for an ideal instrument: each outcome
/// is the same normal operator plus independent noise of variance `Delta^2`,
/// whatever the state.
pub fn repeatability_rms(det: &DetectorParams) -> f64 {
    (2.0 * det.delta_sq()).sqrt()
}

/// How the cutoff is chosen for each sweep point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationPolicy {
    /// Cutoff is `ceil(factor * n_bar) + offset` ...
    pub factor: f64,
    pub offset: usize,
    /// ... raised until the twin-beam tail, and then the displaced state's
    /// weight on the cutoff shell, fall below this mass.
    pub max_tail_mass: f64,
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        Self {
            factor: 2.0,
            offset: 20,
            max_tail_mass: 1e-6,
        }
    }
}

impl TruncationPolicy {
    pub fn n_max(&self, n_bar: f64, lambda: f64) -> usize {
        let base = (self.factor * n_bar).ceil() as usize + self.offset;
        if lambda == 0.0 {
            return base;
        }
        let tail = (self.max_tail_mass.ln() / (2.0 * lambda.ln())).ceil() as usize;
        base.max(tail)
    }
}

/// Largest `|C_ij - delta_ij|` of `C = int F(z) d^2z` over the disk of `grid`,
/// restricted to basis states with every occupation at most `block`.
pub fn completeness_deviation(het: &Heterodyne, grid: &RadialGrid, block: usize) -> Result<f64> {
    let c = het.phase_marginal(grid)?.completeness();
    let t = het.truncation();
    let inside: Vec<usize> = (0..t.dim())
        .filter(|&i| (0..t.n_modes()).all(|m| t.occupation(i, m) <= block))
        .collect();
    let mut worst = 0.0_f64;
    for &i in &inside {
        for &j in &inside {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((c[(i, j)] - target).abs());
        }
    }
    Ok(worst)
}

/// Circular r.m.s. of a phase density about `theta`, by composite Gauss-Legendre
/// quadrature over `(theta - pi, theta + pi]`.
pub fn circular_rms(density: impl Fn(f64) -> f64, theta: f64, panels: usize) -> f64 {
    let rule = GaussLegendre::new(NonZeroUsize::new(16).expect("nonzero"));
    let h = 2.0 * PI / panels as f64;
    let mut mass = 0.0;
    let mut second = 0.0;
    for p in 0..panels {
        let a = -PI + p as f64 * h;
        for &(x, w) in rule.as_node_weight_pairs() {
            let d = a + 0.5 * h * (x + 1.0);
            let v = density(theta + d) * 0.5 * h * w;
            mass += v;
            second += v * d * d;
        }
    }
    (second / mass).sqrt()
}

/// `delta_phi * n_bar` along the optimal family, from the exact phase density.
pub fn sensitivity_sweep(
    n_bars: &[f64],
    eta: f64,
    policy: &TruncationPolicy,
) -> Result<Vec<SensitivityPoint>> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(invalid("eta", eta, "must lie in (0, 1]"));
    }
    n_bars
        .iter()
        .map(|&n_bar| sensitivity_point(n_bar, eta, policy))
        .collect()
}

pub fn sensitivity_point(
    n_bar: f64,
    eta: f64,
    policy: &TruncationPolicy,
) -> Result<SensitivityPoint> {
    let params = optimal_split(n_bar, 0.0)?;
    let lambda = params.lambda();
    let sigma_sq = delta_sq(lambda, eta);
    let w = params.w;
    let panels = (8.0 * PI / sigma_sq.sqrt() * w.norm()).ceil().max(64.0) as usize;
    let delta_phi = circular_rms(
        |phi| gaussian_phase_density(w, sigma_sq, phi),
        params.theta(),
        panels,
    );

    let mut n_max = policy.n_max(n_bar, lambda);
    let mut state = displaced_twin_beams(&params, &Truncation::new(n_max, 2)?)?;
    while state.discarded_mass() >= policy.max_tail_mass {
        n_max += policy.offset.max(1);
        state = displaced_twin_beams(&params, &Truncation::new(n_max, 2)?)?;
    }
    let n_exact = mean_photons_closed_form(&params);
    Ok(SensitivityPoint {
        n_bar,
        eta,
        lambda,
        w_mod_sq: w.norm_sqr(),
        delta_phi,
        product: delta_phi * n_bar,
        n_bar_exact: n_exact,
        product_exact: delta_phi * n_exact,
        n_max,
        tail_mass: state.discarded_mass(),
    })
}

/// Product predicted by the small-angle Gaussian form:
/// `n_bar * sqrt(Delta^2 / (2 |w|^2))` at the optimal split.
pub fn gaussian_product(n_bar: f64, eta: f64) -> f64 {
    let lambda = 1.0 - 2.0 / n_bar;
    n_bar * (delta_sq(lambda, eta) / n_bar).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::KetState;
    use crate::povm::closed_form_density;
    use crate::twinbeam::DisplacedTwinBeamParams;

    #[test]
    fn linear_inverse_cdf() {
        assert_eq!(sample_linear(1.0, 1.0, 0.3), 0.3);
        // density 2x on [0, 1]: CDF x^2
        assert!((sample_linear(0.0, 2.0, 0.25) - 0.5).abs() < 1e-15);
        // density 2(1 - x): CDF 1 - (1 - x)^2
        assert!((sample_linear(2.0, 0.0, 0.75) - 0.5).abs() < 1e-15);
        assert_eq!(sample_linear(0.0, 0.0, 0.4), 0.4);
    }

    #[test]
    fn spec_validation() {
        let mut s = SamplerSpec::new(1);
        s.validate().unwrap();
        s.nodes_per_axis = 20;
        assert!(s.validate().is_err());
        s.nodes_per_axis = 19;
        assert!(s.validate().is_err());
    }

    #[test]
    fn streams_are_independent_and_reproducible() {
        let s = SamplerSpec::new(9);
        let a: Vec<u64> = (0..4)
            .map({
                let mut r = s.rng(0);
                move |_| r.random()
            })
            .collect();
        let b: Vec<u64> = (0..4)
            .map({
                let mut r = s.rng(0);
                move |_| r.random()
            })
            .collect();
        let c: Vec<u64> = (0..4)
            .map({
                let mut r = s.rng(1);
                move |_| r.random()
            })
            .collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    fn setup(n: usize) -> (OutcomeSampler, DensityOperator, c64, f64) {
        let t = Truncation::new(n, 2).unwrap();
        let det = DetectorParams::ideal(0.6).unwrap();
        let w = c64::new(0.8, -0.4);
        let rho = displaced_twin_beams(&DisplacedTwinBeamParams::new(0.6, w).unwrap(), &t)
            .unwrap()
            .to_density();
        let het = Heterodyne::new(det, t).unwrap();
        let mut spec = SamplerSpec::new(17);
        spec.nodes_per_axis = 101;
        let sigma_sq = delta_sq(0.6, 1.0) + det.delta_sq();
        (OutcomeSampler::new(het, spec).unwrap(), rho, w, sigma_sq)
    }

    #[test]
    fn grid_matches_gaussian_and_sample_moments() {
        let (sampler, rho, w, sigma_sq) = setup(14);
        let grid = sampler.density_grid(&rho).unwrap();
        // The truncated POM loses a little mass at this cutoff.
        assert!((grid.total_mass() - 1.0).abs() < 2e-2);
        assert!(grid.boundary_fraction() <= SAMPLER_BOUNDARY_MASS);
        let det = *sampler.instrument().detector();
        let i = grid.radii().len() / 2;
        let j = grid.angles().len() / 3;
        let z = c64::from_polar(grid.radii()[i], grid.angles()[j]);
        let exact = closed_form_density(w, 0.6, z, &det);
        assert!((grid.value(i, j) - exact).abs() < 2e-2);

        let mut rng = sampler.spec().rng(0);
        let n = 10_000;
        let zs: Vec<c64> = (0..n).map(|_| grid.sample(&mut rng).z).collect();
        let mean = zs.iter().sum::<c64>() / n as f64;
        let sigma_axis = (sigma_sq / 2.0).sqrt();
        let tol = 4.0 * sigma_axis / (n as f64).sqrt();
        assert!(
            (mean.re - w.re).abs() < tol && (mean.im - w.im).abs() < tol,
            "{mean}"
        );
        let var_re = zs.iter().map(|z| (z.re - mean.re).powi(2)).sum::<f64>() / n as f64;
        let var_im = zs.iter().map(|z| (z.im - mean.im).powi(2)).sum::<f64>() / n as f64;
        for v in [var_re, var_im] {
            assert!((v / (sigma_sq / 2.0) - 1.0).abs() < 0.1, "{v}");
        }

        // Radial empirical CDF against the grid CDF.
        let mut radii: Vec<f64> = zs.iter().map(|z| z.norm()).collect();
        radii.sort_by(f64::total_cmp);
        let mut sup = 0.0f64;
        for (k, r) in radii.iter().enumerate().step_by(50) {
            let emp = (k + 1) as f64 / n as f64;
            sup = sup.max((emp - grid.radial_cdf(*r)).abs());
        }
        assert!(sup < 0.02, "{sup}");
    }

    #[test]
    fn narrow_window_fails_coverage() {
        let (sampler, rho, _, _) = setup(10);
        let mut spec = *sampler.spec();
        spec.grid_halfwidth_sigmas = 2.0;
        let het = sampler.instrument();
        let cur = het.current();
        let moments = (
            cur.mean(&rho).unwrap(),
            cur.mean_modulus_sq(&rho).unwrap(),
            cur.mean_square(&rho).unwrap(),
        );
        let win = Window::around(moments, het.detector().delta_sq(), 2.0);
        let ring = &mut |r: f64, angles: &[f64]| -> Result<Vec<f64>> {
            let series = het.radial_density(&rho, r)?;
            Ok(angles.iter().map(|&phi| series.eval(phi)).collect())
        };
        assert!(DensityGrid::build(win, spec.nodes_per_axis, ring).is_err());
        spec.grid_halfwidth_sigmas = 0.5;
        let s = OutcomeSampler::new(sampler.instrument().clone(), spec).unwrap();
        assert!(matches!(
            s.density_grid(&rho),
            Err(Error::QuadratureCoverage { .. })
        ));
    }

    #[test]
    fn sequence_is_deterministic_and_pure() {
        let t = Truncation::new(8, 2).unwrap();
        let det = DetectorParams::ideal(0.5).unwrap();
        let rho = KetState::vacuum(t).to_density();
        let mut spec = SamplerSpec::new(5);
        spec.nodes_per_axis = 41;
        let a = run_sequence(&rho, 3, &det, &spec).unwrap();
        let b = run_sequence(&rho, 3, &det, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.outcomes.len(), 3);
        assert!(a.purities.iter().all(|&p| p >= 1.0 - 1e-8));
        spec.seed = 6;
        let c = run_sequence(&rho, 3, &det, &spec).unwrap();
        assert_ne!(a.outcomes, c.outcomes);
        assert!(run_sequence(&rho, 0, &det, &spec).is_err());
    }

    #[test]
    fn repeatability_constant() {
        let det = DetectorParams::ideal(0.6).unwrap();
        assert!((repeatability_rms(&det) - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn circular_rms_of_wrapped_uniform_and_narrow_gaussian() {
        let flat = circular_rms(|_| 1.0 / (2.0 * PI), 0.3, 64);
        assert!((flat - PI / 3f64.sqrt()).abs() < 1e-12);
        let s: f64 = 0.05;
        let g = |phi: f64| (-(phi - 1.0).powi(2) / (2.0 * s * s)).exp();
        assert!((circular_rms(g, 1.0, 256) - s).abs() < 1e-10);
    }

    #[test]
    fn sensitivity_near_heisenberg() {
        let pts =
            sensitivity_sweep(&[10.0, 20.0, 40.0], 1.0, &TruncationPolicy::default()).unwrap();
        for p in &pts {
            assert!((0.9..=1.1).contains(&p.product), "{p:?}");
            let g = gaussian_product(p.n_bar, 1.0);
            assert!((p.product - g).abs() < 0.02 * g, "{} vs {g}", p.product);
            assert!(p.tail_mass < 1e-6);
        }
        assert!(pts[0].product > pts[1].product && pts[1].product > pts[2].product);
    }

    #[test]
    fn policy_respects_tail_rule() {
        let p = TruncationPolicy::default();
        assert_eq!(p.n_max(10.0, 0.8), 40);
        let lam: f64 = 0.95;
        let n = p.n_max(40.0, lam);
        assert!(lam.powi(2 * (n as i32 + 1)) < 1e-6);
    }
}
