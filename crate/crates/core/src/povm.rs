//! Heterodyne photocurrent, its POM, amplitude operators and state reduction.
//!
//! Everything here leans on one identity. With `R(phi) = exp(i phi (n_s - n_i))`
//! the current obeys `R Z R^dag = e^{-i phi} Z`, hence
//! `F(r e^{i phi}) = R F(r) R^dag` holds exactly, truncation included. `M(r)`
//! is real symmetric for real `r`, so a single real eigendecomposition per
//! radius serves every angle.

use std::f64::consts::PI;
use std::num::NonZeroUsize;

use faer::Mat;
use gauss_quad::legendre::GaussLegendre;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fock::{
    hermitian_residual, DenseOperator, DensityOperator, KetState, MemoryCap, SymmetricEigen,
    Truncation,
};
use crate::{c64, CMat};

/// Reductions below this outcome density are refused.
pub const DENSITY_FLOOR: f64 = 1e-30;
/// Minimum Gaussian weight a reduction quadrature must capture.
pub const COVERAGE_REQUIRED: f64 = 1.0 - 1e-6;

/// `(1 - lambda)/(1 + lambda) + (1 - eta)/eta`
pub fn delta_sq(lambda: f64, eta: f64) -> f64 {
    (1.0 - lambda) / (1.0 + lambda) + (1.0 - eta) / eta
}

/// Probe squeezing `lambda` and quantum efficiency `eta` of the detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    lambda: f64,
    eta: f64,
}

impl DetectorParams {
    pub fn new(lambda: f64, eta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&lambda) {
            return Err(invalid("lambda", lambda, "must lie in [0, 1)"));
        }
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(invalid("eta", eta, "must lie in (0, 1]"));
        }
        Ok(Self { lambda, eta })
    }

    pub fn ideal(lambda: f64) -> Result<Self> {
        Self::new(lambda, 1.0)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn is_ideal(&self) -> bool {
        self.eta == 1.0
    }

    /// Outcome variance including the efficiency penalty.
    pub fn delta_sq(&self) -> f64 {
        delta_sq(self.lambda, self.eta)
    }

    /// Variance of the same probe read out with unit efficiency.
    pub fn ideal_delta_sq(&self) -> f64 {
        delta_sq(self.lambda, 1.0)
    }
}

/// One heterodyne outcome with the density it was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeterodyneOutcome {
    pub z: c64,
    pub density: f64,
}

impl HeterodyneOutcome {
    pub fn new(z: c64, density: f64) -> Self {
        Self { z, density }
    }

    /// `arg z`
    pub fn phase(&self) -> f64 {
        self.z.arg()
    }
}

/// Post-measurement state and the outcome that produced it.
#[derive(Debug, Clone)]
pub struct ReductionResult {
    pub state: DensityOperator,
    pub outcome: HeterodyneOutcome,
    pub purity: f64,
    /// For finite efficiency: quadrature trace divided by `Tr[F_eta rho]`.
    pub normalization_ratio: Option<f64>,
}

/// The current `Z = a_s + a_i^dag` on a chosen (signal, image) pair of modes.
#[derive(Debug, Clone)]
pub struct CurrentOperator {
    truncation: Truncation,
    signal: usize,
    image: usize,
    z: Mat<f64>,
    ztz: Mat<f64>,
    charge: Vec<i32>,
}

impl CurrentOperator {
    pub fn new(truncation: Truncation, modes: (usize, usize)) -> Result<Self> {
        let (signal, image) = modes;
        truncation.check_mode(signal)?;
        truncation.check_mode(image)?;
        if signal == image {
            return Err(invalid(
                "image_index",
                image as f64,
                "signal and image modes must differ",
            ));
        }
        let d = truncation.dim();
        MemoryCap::from_env().check_dense(d)?;
        let n_max = truncation.n_max();
        let (ss, si) = (truncation.stride(signal), truncation.stride(image));

        // Each column has at most two entries; collect them per row so that
        // Z^T Z can be assembled without a dense product.
        let mut z = Mat::<f64>::zeros(d, d);
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); d];
        let mut charge = Vec::with_capacity(d);
        for j in 0..d {
            let ns = truncation.occupation(j, signal);
            let ni = truncation.occupation(j, image);
            charge.push(ns as i32 - ni as i32);
            if ns > 0 {
                let v = (ns as f64).sqrt();
                z[(j - ss, j)] += v;
                rows[j - ss].push((j, v));
            }
            if ni < n_max {
                let v = ((ni + 1) as f64).sqrt();
                z[(j + si, j)] += v;
                rows[j + si].push((j, v));
            }
        }
        let mut ztz = Mat::<f64>::zeros(d, d);
        for row in &rows {
            for &(i, vi) in row {
                for &(j, vj) in row {
                    ztz[(i, j)] += vi * vj;
                }
            }
        }
        Ok(Self {
            truncation,
            signal,
            image,
            z,
            ztz,
            charge,
        })
    }

    pub fn truncation(&self) -> &Truncation {
        &self.truncation
    }

    pub fn modes(&self) -> (usize, usize) {
        (self.signal, self.image)
    }

    /// `n_s - n_i` for every basis state.
    pub fn charge(&self) -> &[i32] {
        &self.charge
    }

    /// Real matrix of `Z`.
    pub fn real_matrix(&self) -> &Mat<f64> {
        &self.z
    }

    /// Real matrix of `Z^dag Z`.
    pub fn number_like(&self) -> &Mat<f64> {
        &self.ztz
    }

    pub fn operator(&self) -> DenseOperator {
        let d = self.truncation.dim();
        let m = Mat::from_fn(d, d, |i, j| c64::new(self.z[(i, j)], 0.0));
        DenseOperator::new(m, self.truncation).expect("dimensions agree by construction")
    }

    /// `(Z + Z^dag)/2` and `(Z - Z^dag)/(2i)`.
    pub fn quadratures(&self) -> Result<(DenseOperator, DenseOperator)> {
        let d = self.truncation.dim();
        let z = &self.z;
        let z1 = Mat::from_fn(d, d, |i, j| c64::new(0.5 * (z[(i, j)] + z[(j, i)]), 0.0));
        let z2 = Mat::from_fn(d, d, |i, j| c64::new(0.0, -0.5 * (z[(i, j)] - z[(j, i)])));
        Ok((
            DenseOperator::new(z1, self.truncation)?.into_hermitian()?,
            DenseOperator::new(z2, self.truncation)?.into_hermitian()?,
        ))
    }

    /// `M(r) = (Z - r)^dag (Z - r)` for real `r`.
    pub fn generator(&self, r: f64) -> Mat<f64> {
        let d = self.truncation.dim();
        let (z, ztz) = (&self.z, &self.ztz);
        Mat::from_fn(d, d, |i, j| {
            let diag = if i == j { r * r } else { 0.0 };
            ztz[(i, j)] - r * (z[(i, j)] + z[(j, i)]) + diag
        })
    }

    /// Upper bound on the operator norm of the truncated current.
    pub fn norm_bound(&self) -> f64 {
        2.0 * (self.truncation.n_max() as f64).sqrt()
    }

    /// Largest `|k_i - k_j|` that can occur.
    pub fn max_charge_difference(&self) -> usize {
        2 * self.truncation.n_max()
    }

    /// `R(phi) A R(phi)^dag` for a real matrix `A`.
    pub fn rotate_real(&self, a: &Mat<f64>, phi: f64) -> CMat {
        let ph = self.phases(phi);
        let d = self.truncation.dim();
        Mat::from_fn(d, d, |i, j| ph[i] * ph[j].conj() * a[(i, j)])
    }

    /// `R(phi) A R(phi)^dag`
    pub fn rotate(&self, a: &CMat, phi: f64) -> CMat {
        let ph = self.phases(phi);
        let d = self.truncation.dim();
        Mat::from_fn(d, d, |i, j| ph[i] * ph[j].conj() * a[(i, j)])
    }

    /// Diagonal of `R(phi)`.
    pub fn phases(&self, phi: f64) -> Vec<c64> {
        let n = self.truncation.n_max() as i32;
        let table: Vec<c64> = (-n..=n)
            .map(|k| c64::from_polar(1.0, phi * k as f64))
            .collect();
        self.charge
            .iter()
            .map(|&k| table[(k + n) as usize])
            .collect()
    }

    /// `Tr[Z rho]`
    pub fn mean(&self, rho: &DensityOperator) -> Result<c64> {
        self.check(rho.truncation())?;
        Ok(real_trace_product(&self.z, rho.matrix()))
    }

    /// `Tr[Z^dag Z rho]`
    pub fn mean_modulus_sq(&self, rho: &DensityOperator) -> Result<f64> {
        self.check(rho.truncation())?;
        Ok(real_trace_product(&self.ztz, rho.matrix()).re)
    }

    /// `Tr[Z^2 rho]`
    pub fn mean_square(&self, rho: &DensityOperator) -> Result<c64> {
        self.check(rho.truncation())?;
        let z2 = &self.z * &self.z;
        Ok(real_trace_product(&z2, rho.matrix()))
    }

    fn check(&self, t: &Truncation) -> Result<()> {
        if *t != self.truncation {
            return Err(Error::DimensionMismatch {
                expected: self.truncation.dim(),
                found: t.dim(),
            });
        }
        Ok(())
    }

    /// Fourier coefficients in `phi` of `Tr[R A R^dag rho]`.
    pub fn sector_series(&self, a: &Mat<f64>, rho: &CMat) -> SectorSeries {
        let off = self.max_charge_difference() as i32;
        let mut coeffs = vec![c64::new(0.0, 0.0); 2 * off as usize + 1];
        let d = self.truncation.dim();
        for j in 0..d {
            let kj = self.charge[j];
            for i in 0..d {
                let aij = a[(i, j)];
                if aij != 0.0 {
                    coeffs[(self.charge[i] - kj + off) as usize] += rho[(j, i)] * aij;
                }
            }
        }
        SectorSeries {
            coeffs,
            offset: off,
        }
    }

    /// `A` with entries between different charge sectors removed, which is
    /// `(2 pi)^{-1} int R(phi) A R(phi)^dag dphi`.
    pub fn sector_diagonal(&self, a: &Mat<f64>) -> Mat<f64> {
        let d = self.truncation.dim();
        Mat::from_fn(d, d, |i, j| {
            if self.charge[i] == self.charge[j] {
                a[(i, j)]
            } else {
                0.0
            }
        })
    }
}

fn real_trace_product(a: &Mat<f64>, rho: &CMat) -> c64 {
    let d = a.nrows();
    let mut acc = c64::new(0.0, 0.0);
    for j in 0..d {
        for i in 0..d {
            let v = a[(i, j)];
            if v != 0.0 {
                acc += rho[(j, i)] * v;
            }
        }
    }
    acc
}

fn to_complex(a: &Mat<f64>) -> CMat {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| c64::new(a[(i, j)], 0.0))
}

/// Trigonometric polynomial `sum_k c_k e^{i k phi}`; real for Hermitian input.
#[derive(Debug, Clone, PartialEq)]
pub struct SectorSeries {
    coeffs: Vec<c64>,
    offset: i32,
}

impl SectorSeries {
    pub fn eval(&self, phi: f64) -> f64 {
        let step = c64::from_polar(1.0, phi);
        let mut ph = c64::from_polar(1.0, -phi * self.offset as f64);
        let mut acc = 0.0;
        for c in &self.coeffs {
            acc += (c * ph).re;
            ph *= step;
        }
        acc
    }

    /// Constant term, the angular average.
    pub fn mean(&self) -> f64 {
        self.coeffs[self.offset as usize].re
    }

    pub fn coefficient(&self, k: i32) -> c64 {
        let idx = k + self.offset;
        if idx < 0 || idx as usize >= self.coeffs.len() {
            c64::new(0.0, 0.0)
        } else {
            self.coeffs[idx as usize]
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.coeffs.iter_mut().for_each(|c| *c *= s);
    }

    pub fn add_scaled(&mut self, other: &SectorSeries, s: f64) {
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += b * s;
        }
    }
}

/// Spectral data of `M(r)` at one radius.
#[derive(Debug, Clone)]
pub struct RadialPom {
    r: f64,
    delta_sq: f64,
    eigen: SymmetricEigen,
}

impl RadialPom {
    pub fn new(current: &CurrentOperator, r: f64, delta_sq: f64) -> Result<Self> {
        if !(r >= 0.0) || !r.is_finite() {
            return Err(invalid("r", r, "radius must be finite and non-negative"));
        }
        if !(delta_sq > 0.0) {
            return Err(invalid("delta_sq", delta_sq, "must be positive"));
        }
        let eigen = SymmetricEigen::new(&current.generator(r))?;
        Ok(Self { r, delta_sq, eigen })
    }

    pub fn radius(&self) -> f64 {
        self.r
    }

    /// Eigenvalues of `F(r)`, which `F(r e^{i phi})` shares.
    pub fn pom_values(&self) -> Vec<f64> {
        let ds = self.delta_sq;
        self.eigen
            .values
            .iter()
            .map(|&x| (-x.max(0.0) / ds).exp() / (PI * ds))
            .collect()
    }

    /// `F(r)` as a real symmetric matrix.
    pub fn pom(&self) -> Mat<f64> {
        let ds = self.delta_sq;
        self.eigen.apply(|x| (-x.max(0.0) / ds).exp() / (PI * ds))
    }

    /// `K(r) = (sqrt(pi) Delta)^{-1} exp(-M(r) / (2 Delta^2))`, so `F(r) = K(r)^2`.
    pub fn kraus(&self) -> Mat<f64> {
        let ds = self.delta_sq;
        let norm = 1.0 / (PI * ds).sqrt();
        self.eigen
            .apply(|x| norm * (-x.max(0.0) / (2.0 * ds)).exp())
    }

    /// `<psi| F(r e^{i phi}) |psi>` without forming `F`.
    pub fn density_ket(&self, current: &CurrentOperator, psi: &[c64], phi: f64) -> f64 {
        let ph = current.phases(phi);
        let y: Vec<c64> = psi.iter().zip(&ph).map(|(x, p)| x * p.conj()).collect();
        let v = &self.eigen.vectors;
        let f = self.pom_values();
        let d = y.len();
        let mut acc = 0.0;
        for (k, fk) in f.iter().enumerate() {
            if *fk == 0.0 {
                continue;
            }
            let col = v.col(k);
            let mut c = c64::new(0.0, 0.0);
            for i in 0..d {
                c += y[i] * col[i];
            }
            acc += fk * c.norm_sqr();
        }
        acc
    }
}

/// Composite Gauss-Legendre rule on a radial interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadialGrid {
    pub r_min: f64,
    pub r_max: f64,
    pub panels: usize,
    pub order: usize,
}

impl RadialGrid {
    /// Covers every radius at which `F(r)` is above `e^{-64}` of its peak.
    pub fn covering(current: &CurrentOperator, delta_sq: f64) -> Self {
        let delta = delta_sq.sqrt();
        let r_max = current.norm_bound() + 8.0 * delta;
        Self {
            r_min: 0.0,
            r_max,
            panels: (r_max / delta).ceil().max(1.0) as usize,
            order: 10,
        }
    }

    /// Single-panel rule with `nodes` points over `[0, r_max]`.
    pub fn single(r_max: f64, nodes: usize) -> Self {
        Self {
            r_min: 0.0,
            r_max,
            panels: 1,
            order: nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.panels * self.order
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nodes(&self) -> Result<Vec<(f64, f64)>> {
        if !(self.r_max > self.r_min) || self.r_min < 0.0 {
            return Err(invalid("r_max", self.r_max, "radial interval is empty"));
        }
        let order = NonZeroUsize::new(self.order)
            .ok_or_else(|| invalid("order", 0.0, "must be positive"))?;
        if self.panels == 0 {
            return Err(invalid("panels", 0.0, "must be positive"));
        }
        let rule = GaussLegendre::new(order);
        let h = (self.r_max - self.r_min) / self.panels as f64;
        let mut out = Vec::with_capacity(self.len());
        for p in 0..self.panels {
            let a = self.r_min + p as f64 * h;
            for &(x, w) in rule.as_node_weight_pairs() {
                out.push((a + 0.5 * h * (x + 1.0), 0.5 * h * w));
            }
        }
        Ok(out)
    }
}

/// Rectangular grid used for the finite-efficiency reduction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureGrid {
    pub half_width_sigmas: f64,
    pub nodes_per_axis: usize,
}

impl Default for QuadratureGrid {
    fn default() -> Self {
        Self {
            half_width_sigmas: 6.0,
            nodes_per_axis: 41,
        }
    }
}

/// The heterodyne instrument on a given current operator.
#[derive(Debug, Clone)]
pub struct Heterodyne {
    current: CurrentOperator,
    det: DetectorParams,
}

impl Heterodyne {
    /// Signal mode 0, image mode 1.
    pub fn new(det: DetectorParams, truncation: Truncation) -> Result<Self> {
        Ok(Self {
            current: CurrentOperator::new(truncation, (0, 1))?,
            det,
        })
    }

    pub fn with_current(det: DetectorParams, current: CurrentOperator) -> Self {
        Self { current, det }
    }

    pub fn detector(&self) -> &DetectorParams {
        &self.det
    }

    pub fn current(&self) -> &CurrentOperator {
        &self.current
    }

    pub fn truncation(&self) -> &Truncation {
        self.current.truncation()
    }

    /// Radial data with the efficiency-degraded variance.
    pub fn radial(&self, r: f64) -> Result<RadialPom> {
        RadialPom::new(&self.current, r, self.det.delta_sq())
    }

    fn ideal_radial(&self, r: f64) -> Result<RadialPom> {
        RadialPom::new(&self.current, r, self.det.ideal_delta_sq())
    }

    /// `F(z)`
    pub fn pom_element(&self, z: c64) -> Result<DenseOperator> {
        let rad = self.radial(z.norm())?;
        let m = self.current.rotate_real(&rad.pom(), z.arg());
        DenseOperator::new(m, *self.truncation())?.into_hermitian()
    }

    /// `Omega(z) = e^{-i z1 z2} (sqrt(pi) Delta)^{-1} exp(-M(z) / (2 Delta^2))`.
    pub fn amplitude_operator(&self, z: c64) -> Result<DenseOperator> {
        if !self.det.is_ideal() {
            return Err(invalid(
                "eta",
                self.det.eta,
                "amplitude operators exist only for unit efficiency",
            ));
        }
        let rad = self.ideal_radial(z.norm())?;
        let global = c64::from_polar(1.0, -z.re * z.im);
        let m = self.current.rotate_real(&rad.kraus(), z.arg());
        let d = m.nrows();
        DenseOperator::new(
            Mat::from_fn(d, d, |i, j| m[(i, j)] * global),
            *self.truncation(),
        )
    }

    /// `Tr[F(z) rho]`
    pub fn outcome_density(&self, rho: &DensityOperator, z: c64) -> Result<f64> {
        Ok(self.radial_density(rho, z.norm())?.eval(z.arg()))
    }

    /// `<psi| F(z) |psi>`
    pub fn outcome_density_ket(&self, psi: &KetState, z: c64) -> Result<f64> {
        self.check(psi.truncation())?;
        let rad = self.radial(z.norm())?;
        Ok(rad.density_ket(&self.current, psi.amplitudes(), z.arg()))
    }

    /// `P(r, phi)` for all `phi` at once.
    pub fn radial_density(&self, rho: &DensityOperator, r: f64) -> Result<SectorSeries> {
        self.check(rho.truncation())?;
        let rad = self.radial(r)?;
        Ok(self.current.sector_series(&rad.pom(), rho.matrix()))
    }

    fn check(&self, t: &Truncation) -> Result<()> {
        self.current.check(t)
    }

    /// `Omega rho Omega^dag / Tr[F rho]`
    pub fn reduce_state(&self, rho: &DensityOperator, z: c64) -> Result<ReductionResult> {
        if !self.det.is_ideal() {
            return Err(invalid(
                "eta",
                self.det.eta,
                "use reduce_state_eta for finite efficiency",
            ));
        }
        self.check(rho.truncation())?;
        let rad = self.ideal_radial(z.norm())?;
        let k = to_complex(&rad.kraus());
        let tau = self.sandwich(&k, rho.matrix(), z.arg());
        let density = crate::fock::trace(&tau).re;
        if !(density > DENSITY_FLOOR) {
            return Err(Error::DensityBelowFloor {
                density,
                floor: DENSITY_FLOOR,
            });
        }
        self.finish(tau, density, HeterodyneOutcome::new(z, density), None)
    }

    /// `R K R^dag rho R K R^dag`, unnormalized.
    fn sandwich(&self, k: &CMat, rho: &CMat, phi: f64) -> CMat {
        let sigma = self.current.rotate(rho, -phi);
        let tau = k * &sigma * k;
        self.current.rotate(&tau, phi)
    }

    fn finish(
        &self,
        mut tau: CMat,
        norm: f64,
        outcome: HeterodyneOutcome,
        ratio: Option<f64>,
    ) -> Result<ReductionResult> {
        let d = tau.nrows();
        let s = 1.0 / norm;
        for j in 0..d {
            for i in 0..j {
                let avg = (tau[(i, j)] + tau[(j, i)].conj()) * (0.5 * s);
                tau[(i, j)] = avg;
                tau[(j, i)] = avg.conj();
            }
            tau[(j, j)] = c64::new(tau[(j, j)].re * s, 0.0);
        }
        let state = DensityOperator::from_matrix_unchecked(tau, *self.truncation())?;
        let purity = state.purity();
        Ok(ReductionResult {
            state,
            outcome,
            purity,
            normalization_ratio: ratio,
        })
    }

    /// Reduction for finite efficiency: a Gaussian mixture of ideal
    /// reductions over `z'` about the recorded `z`.
    ///
    /// The amplitude operators inside the mixture use the unit-efficiency
    /// variance. The result is normalized by the quadrature's own trace;
    /// its ratio to `Tr[F_eta(z) rho]` is reported alongside.
    pub fn reduce_state_eta(
        &self,
        rho: &DensityOperator,
        z: c64,
        quad: &QuadratureGrid,
    ) -> Result<ReductionResult> {
        let eta = self.det.eta;
        if self.det.is_ideal() {
            return self.reduce_state(rho, z);
        }
        self.check(rho.truncation())?;
        let n = quad.nodes_per_axis;
        if n < 3 || n % 2 == 0 {
            return Err(invalid(
                "nodes_per_axis",
                n as f64,
                "must be odd and at least 3",
            ));
        }
        let spread = (1.0 - eta) / eta;
        let sigma = (spread / 2.0).sqrt();
        let half = quad.half_width_sigmas * sigma;
        let h = 2.0 * half / (n - 1) as f64;
        let trap = |i: usize| if i == 0 || i == n - 1 { 0.5 * h } else { h };

        let mut coverage = 0.0;
        let mut nodes = Vec::with_capacity(n * n);
        for ix in 0..n {
            for iy in 0..n {
                let dz = c64::new(-half + ix as f64 * h, -half + iy as f64 * h);
                let w = trap(ix) * trap(iy) * (-dz.norm_sqr() / spread).exp() / (PI * spread);
                coverage += w;
                nodes.push((z + dz, w));
            }
        }
        if coverage < COVERAGE_REQUIRED {
            return Err(Error::QuadratureCoverage {
                coverage,
                required: COVERAGE_REQUIRED,
            });
        }

        let d = self.truncation().dim();
        let mut acc = Mat::<c64>::zeros(d, d);
        for (zp, w) in nodes {
            if w < 1e-300 {
                continue;
            }
            let rad = self.ideal_radial(zp.norm())?;
            let k = to_complex(&rad.kraus());
            let tau = self.sandwich(&k, rho.matrix(), zp.arg());
            acc += Mat::from_fn(d, d, |i, j| tau[(i, j)] * w);
        }
        let total = crate::fock::trace(&acc).re;
        if !(total > DENSITY_FLOOR) {
            return Err(Error::DensityBelowFloor {
                density: total,
                floor: DENSITY_FLOOR,
            });
        }
        let density = self.outcome_density(rho, z)?;
        self.finish(
            acc,
            total,
            HeterodyneOutcome::new(z, density),
            Some(total / density),
        )
    }

    /// `int_0^{r_max} r F(r) dr`, the seed of the marginal phase POM.
    pub fn phase_marginal(&self, grid: &RadialGrid) -> Result<PhaseMarginal> {
        let d = self.truncation().dim();
        let mut g = Mat::<f64>::zeros(d, d);
        for (r, w) in grid.nodes()? {
            let f = self.radial(r)?.pom();
            g += Mat::from_fn(d, d, |i, j| f[(i, j)] * (r * w));
        }
        Ok(PhaseMarginal {
            current: self.current.clone(),
            g,
            grid: *grid,
        })
    }

    /// Phase marginal over every radius where `F` is non-negligible.
    pub fn full_phase_marginal(&self) -> Result<PhaseMarginal> {
        self.phase_marginal(&RadialGrid::covering(&self.current, self.det.delta_sq()))
    }
}

/// `dmu(phi) = R(phi) G R(phi)^dag` with `G = int r F(r) dr`.
#[derive(Debug, Clone)]
pub struct PhaseMarginal {
    current: CurrentOperator,
    g: Mat<f64>,
    grid: RadialGrid,
}

impl PhaseMarginal {
    pub fn grid(&self) -> &RadialGrid {
        &self.grid
    }

    pub fn seed(&self) -> &Mat<f64> {
        &self.g
    }

    /// The operator density `dmu(phi)/dphi`.
    pub fn operator(&self, phi: f64) -> Result<DenseOperator> {
        let m = self.current.rotate_real(&self.g, phi);
        DenseOperator::new(m, *self.current.truncation())?.into_hermitian()
    }

    pub fn density(&self, rho: &DensityOperator, phi: f64) -> Result<f64> {
        Ok(self.series(rho)?.eval(phi))
    }

    /// `Tr[dmu(phi) rho]` as a trigonometric polynomial in `phi`.
    pub fn series(&self, rho: &DensityOperator) -> Result<SectorSeries> {
        self.current.check(rho.truncation())?;
        Ok(self.current.sector_series(&self.g, rho.matrix()))
    }

    /// `int F(z) d^2z` over the grid's disk, which is `2 pi` times the
    /// charge-diagonal part of `G`.
    pub fn completeness(&self) -> Mat<f64> {
        let s = self.current.sector_diagonal(&self.g);
        Mat::from_fn(s.nrows(), s.ncols(), |i, j| 2.0 * PI * s[(i, j)])
    }
}

/// Error function, backed by `libm`.
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// `(pi sigma_sq)^{-1} exp(-|z - w|^2 / sigma_sq)`
pub fn gaussian_density(w: c64, sigma_sq: f64, z: c64) -> f64 {
    (-(z - w).norm_sqr() / sigma_sq).exp() / (PI * sigma_sq)
}

/// Closed-form outcome density for a displaced twin beam read by `det`.
pub fn closed_form_density(w: c64, state_lambda: f64, z: c64, det: &DetectorParams) -> f64 {
    gaussian_density(w, delta_sq(state_lambda, 1.0) + det.delta_sq(), z)
}

/// Marginal phase density of a circular Gaussian of variance `sigma_sq` centered at `w`.
pub fn gaussian_phase_density(w: c64, sigma_sq: f64, phi: f64) -> f64 {
    let s = sigma_sq.sqrt();
    let u = w * c64::from_polar(1.0, -phi);
    let flat = (-w.norm_sqr() / sigma_sq).exp() / (2.0 * PI);
    let peak = u.re / (PI * s)
        * (-(u.im * u.im) / sigma_sq).exp()
        * (PI.sqrt() / 2.0)
        * (1.0 + erf(u.re / s));
    flat + peak
}

pub fn current_operator(truncation: &Truncation, modes: (usize, usize)) -> Result<CurrentOperator> {
    CurrentOperator::new(*truncation, modes)
}

pub fn pom_element(z: c64, det: &DetectorParams, truncation: &Truncation) -> Result<DenseOperator> {
    Heterodyne::new(*det, *truncation)?.pom_element(z)
}

pub fn amplitude_operator(
    z: c64,
    det: &DetectorParams,
    truncation: &Truncation,
) -> Result<DenseOperator> {
    Heterodyne::new(*det, *truncation)?.amplitude_operator(z)
}

pub fn outcome_density(rho: &DensityOperator, z: c64, det: &DetectorParams) -> Result<f64> {
    Heterodyne::new(*det, *rho.truncation())?.outcome_density(rho, z)
}

pub fn reduce_state(
    rho: &DensityOperator,
    z: c64,
    det: &DetectorParams,
) -> Result<ReductionResult> {
    Heterodyne::new(*det, *rho.truncation())?.reduce_state(rho, z)
}

pub fn reduce_state_eta(
    rho: &DensityOperator,
    z: c64,
    det: &DetectorParams,
    quad: &QuadratureGrid,
) -> Result<ReductionResult> {
    Heterodyne::new(*det, *rho.truncation())?.reduce_state_eta(rho, z, quad)
}

pub fn phase_pom(phi: f64, det: &DetectorParams, truncation: &Truncation) -> Result<DenseOperator> {
    Heterodyne::new(*det, *truncation)?
        .full_phase_marginal()?
        .operator(phi)
}

pub fn phase_density(rho: &DensityOperator, phi: f64, det: &DetectorParams) -> Result<f64> {
    Heterodyne::new(*det, *rho.truncation())?
        .full_phase_marginal()?
        .density(rho, phi)
}

/// True when `m` is Hermitian to the operator tolerance.
pub fn is_hermitian(m: &CMat) -> bool {
    hermitian_residual(m) <= crate::fock::HERMITIAN_TOL
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{annihilator, displacement, embed, hermitian_function};
    use crate::twinbeam::{
        displaced_twin_beams, twin_beams, DisplacedTwinBeamParams, TwinBeamParams,
    };

    fn t2(n: usize) -> Truncation {
        Truncation::new(n, 2).unwrap()
    }

    fn dtb(lambda: f64, w: c64, n: usize) -> KetState {
        displaced_twin_beams(&DisplacedTwinBeamParams::new(lambda, w).unwrap(), &t2(n)).unwrap()
    }

    #[test]
    fn variance_law() {
        assert!((delta_sq(1.0 / 3.0, 1.0) - 0.5).abs() < 1e-12);
        assert!((delta_sq(1.0 / 3.0, 0.5) - 1.5).abs() < 1e-12);
        let a = DetectorParams::new(0.3, 1.0).unwrap().delta_sq();
        let b = DetectorParams::new(0.5, 1.0).unwrap().delta_sq();
        let c = DetectorParams::new(0.5, 0.9).unwrap().delta_sq();
        assert!(a > b && c > b);
        assert!(DetectorParams::new(0.5, 0.0).is_err());
        assert!(DetectorParams::new(1.0, 1.0).is_err());
    }

    #[test]
    fn current_matches_embedded_ladders() {
        let t = t2(4);
        let cur = CurrentOperator::new(t, (0, 1)).unwrap();
        let a = annihilator(4).unwrap();
        let z = embed(&a, 0, &t)
            .unwrap()
            .add(&embed(&a, 1, &t).unwrap().adjoint())
            .unwrap();
        assert_eq!(cur.operator().max_abs_diff(&z).unwrap(), 0.0);
        let ztz = z.adjoint().mul(&z).unwrap();
        let d = t.dim();
        let mine = Mat::from_fn(d, d, |i, j| c64::new(cur.number_like()[(i, j)], 0.0));
        assert!(crate::fock::max_abs_diff(&mine, ztz.matrix()) < 1e-14);
        let vac = KetState::vacuum(t);
        assert_eq!(z.expectation(&vac).unwrap(), c64::new(0.0, 0.0));
    }

    #[test]
    fn quadratures_commute_in_the_interior() {
        let n = 5;
        let t = t2(n);
        let (z1, z2) = CurrentOperator::new(t, (0, 1))
            .unwrap()
            .quadratures()
            .unwrap();
        assert!(z1.is_hermitian() && z2.is_hermitian());
        let c = z1.commutator(&z2).unwrap();
        let interior: Vec<usize> = (0..t.dim())
            .filter(|&i| t.occupations(i).iter().all(|&k| k < n))
            .collect();
        let zero = DenseOperator::zeros(t).unwrap();
        assert!(c.block_max_abs_diff(&zero, &interior).unwrap() < 1e-12);
    }

    #[test]
    fn mean_current_of_displaced_twin_beam() {
        let psi = dtb(0.6, c64::new(1.0, -0.5), 24);
        let rho = psi.to_density();
        let cur = CurrentOperator::new(t2(24), (0, 1)).unwrap();
        // The truncated displacement is exact only up to the cutoff.
        assert!((cur.mean(&rho).unwrap() - c64::new(1.0, -0.5)).norm() < 1e-6);
    }

    #[test]
    fn rotation_path_matches_direct_construction() {
        let t = t2(5);
        let det = DetectorParams::new(0.4, 0.9).unwrap();
        let het = Heterodyne::new(det, t).unwrap();
        let zop = het.current().operator();
        let id = DenseOperator::identity(t).unwrap();
        for z in [c64::new(0.7, -1.1), c64::new(-0.3, 0.2), c64::new(0.0, 0.0)] {
            let shifted = zop.sub(&id.scale(z)).unwrap();
            let m = shifted
                .adjoint()
                .mul(&shifted)
                .unwrap()
                .into_hermitian()
                .unwrap();
            let ds = det.delta_sq();
            let direct =
                hermitian_function(&m, |x| c64::new((-x / ds).exp() / (PI * ds), 0.0)).unwrap();
            let f = het.pom_element(z).unwrap();
            assert!(f.max_abs_diff(&direct).unwrap() < 1e-10, "z = {z}");
        }
    }

    #[test]
    fn pom_spectrum_is_bounded() {
        let det = DetectorParams::ideal(0.6).unwrap();
        let het = Heterodyne::new(det, t2(6)).unwrap();
        let cap = 1.0 / (PI * det.delta_sq());
        for r in [0.0, 0.8, 2.5] {
            for v in het.radial(r).unwrap().pom_values() {
                assert!((0.0..=cap * (1.0 + 1e-12)).contains(&v));
            }
        }
    }

    #[test]
    fn peak_of_convolved_gaussian() {
        // Both the state and the detector carry Delta^2 = 0.25, so the peak
        // of the convolution is 1 / (pi * 0.5).
        let det = DetectorParams::ideal(0.6).unwrap();
        let n = 24;
        let het = Heterodyne::new(det, t2(n)).unwrap();
        let psi = dtb(0.6, c64::new(1.0, 0.0), n);
        let p = het.outcome_density_ket(&psi, c64::new(1.0, 0.0)).unwrap();
        assert!((p - 1.0 / (PI * 0.5)).abs() < 1e-3, "{p}");
        let cf = closed_form_density(c64::new(1.0, 0.0), 0.6, c64::new(1.0, 0.0), &det);
        assert!((cf - 1.0 / (PI * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn closed_form_combined_variance() {
        let det = DetectorParams::ideal(1.0 / 3.0).unwrap();
        let w = c64::new(0.4, 0.1);
        assert!((closed_form_density(w, 1.0 / 3.0, w, &det) - 1.0 / PI).abs() < 1e-14);
    }

    #[test]
    fn amplitude_operator_squares_to_pom() {
        let t = t2(5);
        let det = DetectorParams::ideal(0.5).unwrap();
        let het = Heterodyne::new(det, t).unwrap();
        let z = c64::new(0.9, 0.4);
        let om = het.amplitude_operator(z).unwrap();
        let f = het.pom_element(z).unwrap();
        let prod = om.adjoint().mul(&om).unwrap();
        assert!(prod.max_abs_diff(&f).unwrap() < 1e-9);

        let om0 = het.amplitude_operator(c64::new(0.0, 0.0)).unwrap();
        assert!(om0.hermitian_residual() < 1e-12);
        let e = HermitianEigen::new(om0.matrix()).unwrap();
        assert!(e.values.iter().all(|&v| v > -1e-12));

        let lossy = Heterodyne::new(DetectorParams::new(0.5, 0.9).unwrap(), t).unwrap();
        assert!(lossy.amplitude_operator(z).is_err());
    }

    use crate::fock::HermitianEigen;

    /// `int_0^{r_max} r P(r, phi) dr` by composite Simpson, for every angle at once.
    fn simpson_radial(
        het: &Heterodyne,
        rho: &DensityOperator,
        r_max: f64,
        n: usize,
    ) -> SectorSeries {
        let h = r_max / n as f64;
        let mut acc = het.radial_density(rho, 0.0).unwrap();
        acc.scale(0.0);
        for i in 0..=n {
            let r = i as f64 * h;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc.add_scaled(&het.radial_density(rho, r).unwrap(), w * h / 3.0 * r);
        }
        acc
    }

    #[test]
    fn outcome_mass_and_ideal_moments() {
        let n = 14;
        let t = t2(n);
        let det = DetectorParams::ideal(0.6).unwrap();
        let het = Heterodyne::new(det, t).unwrap();
        let psi = KetState::normalized(
            vec![c64::new(0.8, 0.0), c64::new(0.0, 0.6)]
                .into_iter()
                .chain(std::iter::repeat(c64::new(0.0, 0.0)))
                .take(t.dim())
                .collect(),
            t,
        )
        .unwrap();
        // |0,0> and |0,1> mixed coherently
        let rho = psi.to_density();
        let grid = RadialGrid::covering(het.current(), det.delta_sq());
        let mut mass = 0.0;
        let mut first = c64::new(0.0, 0.0);
        let mut second = 0.0;
        for (r, w) in grid.nodes().unwrap() {
            let s = het.radial_density(&rho, r).unwrap();
            mass += 2.0 * PI * w * r * s.mean();
            // E[z] picks the e^{-i phi} harmonic; E|z|^2 the mean.
            first += 2.0 * PI * w * r * r * s.coefficient(-1);
            second += 2.0 * PI * w * r * r * r * s.mean();
        }
        let cur = het.current();
        assert!((mass - 1.0).abs() < 1e-3, "{mass}");
        assert!((first - cur.mean(&rho).unwrap()).norm() < 1e-3);
        let expect = cur.mean_modulus_sq(&rho).unwrap() + det.delta_sq();
        assert!((second - expect).abs() < 5e-3, "{second} vs {expect}");
    }

    #[test]
    fn displacement_covariance() {
        let n = 20;
        let t = t2(n);
        let det = DetectorParams::ideal(0.3).unwrap();
        let het = Heterodyne::new(det, t).unwrap();
        let c = c64::new(0.3, -0.2);
        let d = displacement(c, 0, &t).unwrap();
        let psi = twin_beams(&TwinBeamParams::new(0.2).unwrap(), &t).unwrap();
        let moved = KetState::normalized(d.apply(&psi).unwrap(), t).unwrap();
        for z in [c64::new(0.5, 0.5), c64::new(-0.4, 0.1), c64::new(1.2, -0.7)] {
            let a = het.outcome_density_ket(&moved, z).unwrap();
            let b = het.outcome_density_ket(&psi, z - c).unwrap();
            assert!((a - b).abs() < 1e-6, "{a} {b}");
        }
    }

    #[test]
    fn ideal_reduction_is_pure_and_pulls_toward_outcome() {
        let n = 20;
        let t = t2(n);
        let det = DetectorParams::ideal(0.5).unwrap();
        let het = Heterodyne::new(det, t).unwrap();
        // Z is Gaussian with variance 1/3 in this state, centered at 0.
        let rho = twin_beams(&TwinBeamParams::new(0.5).unwrap(), &t)
            .unwrap()
            .to_density();
        let z = c64::new(1.0, 0.5);
        let res = het.reduce_state(&rho, z).unwrap();
        assert!(res.purity >= 1.0 - 1e-8);
        assert!((res.state.trace() - 1.0).abs() < 1e-12);
        let s2 = delta_sq(0.5, 1.0);
        let posterior = z * (s2 / (s2 + det.delta_sq()));
        let mean = het.current().mean(&res.state).unwrap();
        assert!((mean - posterior).norm() < 1e-4, "{mean} vs {posterior}");
        let p = het.outcome_density(&rho, z).unwrap();
        assert!((res.outcome.density - p).abs() < 1e-12);
    }

    #[test]
    fn reduction_fails_below_density_floor() {
        let t = t2(4);
        let het = Heterodyne::new(DetectorParams::ideal(0.9).unwrap(), t).unwrap();
        let rho = KetState::vacuum(t).to_density();
        assert!(matches!(
            het.reduce_state(&rho, c64::new(60.0, 0.0)),
            Err(Error::DensityBelowFloor { .. })
        ));
    }

    #[test]
    fn lossy_reduction_mixes() {
        let t = t2(8);
        let rho = dtb(0.3, c64::new(0.5, 0.0), 8).to_density();
        let lossy = Heterodyne::new(DetectorParams::new(0.5, 0.8).unwrap(), t).unwrap();
        let z = c64::new(0.6, 0.2);
        let res = lossy
            .reduce_state_eta(&rho, z, &QuadratureGrid::default())
            .unwrap();
        assert!(res.purity < 1.0 - 1e-3, "{}", res.purity);
        assert!((res.state.trace() - 1.0).abs() < 1e-6);
        // Both routes agree only up to truncation error at this cutoff.
        let ratio = res.normalization_ratio.unwrap();
        assert!((ratio - 1.0).abs() < 1e-2, "{ratio}");
        res.state.validate().unwrap();
    }

    #[test]
    fn lossy_reduction_approaches_ideal() {
        let t = t2(6);
        let rho = dtb(0.3, c64::new(0.5, 0.0), 6).to_density();
        let z = c64::new(0.6, 0.2);
        let ideal = Heterodyne::new(DetectorParams::ideal(0.5).unwrap(), t)
            .unwrap()
            .reduce_state(&rho, z)
            .unwrap();
        let near = Heterodyne::new(DetectorParams::new(0.5, 0.9999).unwrap(), t)
            .unwrap()
            .reduce_state_eta(&rho, z, &QuadratureGrid::default())
            .unwrap();
        let diff = crate::fock::max_abs_diff(ideal.state.matrix(), near.state.matrix());
        assert!(diff < 1e-3, "{diff}");
    }

    #[test]
    fn coarse_grid_fails_coverage() {
        let t = t2(3);
        let rho = KetState::vacuum(t).to_density();
        let het = Heterodyne::new(DetectorParams::new(0.5, 0.8).unwrap(), t).unwrap();
        let grid = QuadratureGrid {
            half_width_sigmas: 2.0,
            nodes_per_axis: 41,
        };
        assert!(matches!(
            het.reduce_state_eta(&rho, c64::new(0.0, 0.0), &grid),
            Err(Error::QuadratureCoverage { .. })
        ));
    }

    #[test]
    fn vacuum_phase_density_is_flat() {
        let t = t2(8);
        let det = DetectorParams::ideal(0.6).unwrap();
        let pm = Heterodyne::new(det, t)
            .unwrap()
            .full_phase_marginal()
            .unwrap();
        let rho = KetState::vacuum(t).to_density();
        let level = pm.density(&rho, 0.0).unwrap();
        assert!((level - 1.0 / (2.0 * PI)).abs() < 1e-3);
        for k in 0..8 {
            let phi = -PI + 0.4 + k as f64 * 0.7;
            assert!((pm.density(&rho, phi).unwrap() - level).abs() < 1e-14);
        }
        let op = pm.operator(0.3).unwrap();
        let e = HermitianEigen::new(op.matrix()).unwrap();
        assert!(e.values.iter().all(|&v| v > -1e-8));
    }

    #[test]
    fn phase_marginal_matches_radial_integration() {
        let n = 10;
        let t = t2(n);
        let det = DetectorParams::ideal(0.6).unwrap();
        let het = Heterodyne::new(det, t).unwrap();
        let pm = het.full_phase_marginal().unwrap();
        let rho = dtb(0.6, c64::new(0.8, 0.6), n).to_density();
        let series = pm.series(&rho).unwrap();
        let oracle = simpson_radial(&het, &rho, pm.grid().r_max, 600);
        let mut best = (f64::MIN, 0.0);
        for k in 0..360 {
            let phi = -PI + (k as f64 + 0.5) * PI / 180.0;
            let a = series.eval(phi);
            assert!((a - oracle.eval(phi)).abs() < 1e-6);
            if a > best.0 {
                best = (a, phi);
            }
        }
        // Maximum at arg w.
        assert!((best.1 - c64::new(0.8, 0.6).arg()).abs() < PI / 180.0);
        assert!((series.mean() * 2.0 * PI - 1.0).abs() < 0.1);
    }

    #[test]
    fn phase_marginal_matches_gaussian_closed_form() {
        let n = 16;
        let t = t2(n);
        let det = DetectorParams::ideal(0.6).unwrap();
        let w = c64::new(1.0, 0.0);
        let pm = Heterodyne::new(det, t)
            .unwrap()
            .full_phase_marginal()
            .unwrap();
        let rho = dtb(0.6, w, n).to_density();
        let sigma_sq = 2.0 * delta_sq(0.6, 1.0);
        for k in 0..24 {
            let phi = -PI + (k as f64 + 0.5) * PI / 12.0;
            let exact = gaussian_phase_density(w, sigma_sq, phi);
            assert!((pm.density(&rho, phi).unwrap() - exact).abs() < 1.5e-2);
        }
    }

    #[test]
    fn erf_values() {
        assert_eq!(erf(0.0), 0.0);
        for x in [0.1, 0.7, 2.3, 5.9] {
            assert!((erf(-x) + erf(x)).abs() <= 1e-15);
        }
        // Maclaurin series 2/sqrt(pi) sum (-1)^n x^{2n+1} / (n! (2n+1))
        let series = |x: f64| {
            let mut term = x;
            let mut sum = x;
            for n in 1..80 {
                term *= -x * x / n as f64;
                sum += term / (2 * n + 1) as f64;
            }
            sum * 2.0 / PI.sqrt()
        };
        assert!((erf(1.0) - 0.842_700_792_949_715).abs() < 1e-12);
        for x in [0.05, 0.5, 1.0, 1.5, 2.0, 3.0] {
            assert!(((erf(x) - series(x)) / series(x)).abs() < 1e-12, "x = {x}");
        }
    }

    #[test]
    fn gaussian_phase_density_is_radial_marginal() {
        let w = c64::new(1.2, -0.4);
        let s2 = 0.7;
        let mut total = 0.0;
        for k in 0..200 {
            let phi = -PI + (k as f64 + 0.5) * 2.0 * PI / 200.0;
            let radial =
                GaussLegendre::new(NonZeroUsize::new(120).unwrap()).integrate(0.0, 9.0, |r| {
                    r * gaussian_density(w, s2, c64::from_polar(r, phi))
                });
            let closed = gaussian_phase_density(w, s2, phi);
            assert!((radial - closed).abs() < 1e-8);
            total += closed * 2.0 * PI / 200.0;
        }
        assert!((total - 1.0).abs() < 1e-10);
    }
}
