//! Four-mode model of the indirect measurement: system modes `a, b` couple
//! to probe modes `c, d`, whose heterodyne current `A = c + d^dag` is then
//! read out. Also plans pump frequencies for a three-wave-mixing setup.

use std::collections::BTreeSet;
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::c64;
use crate::error::{invalid, Error, Result};
use crate::fock::{
    annihilator, embed, unitary_from_hamiltonian, DenseOperator, DensityOperator, HermitianEigen,
    KetState, MemoryCap, Truncation,
};
use crate::povm::{DetectorParams, Heterodyne, RadialGrid};
use crate::twinbeam::{twin_beams, TwinBeamParams};

/// Largest per-mode cutoff accepted for the four-mode space (dimension 2401).
pub const MAX_FOUR_MODE_N: usize = 6;
/// Default frequency tolerance of the resonance checks.
pub const DEFAULT_FREQUENCY_TOL: f64 = 1e-9;
/// Cutoff of the two-mode space on which outcome moments are predicted.
pub const PREDICTION_N_MAX: usize = 14;
/// Largest characteristic-function residual accepted at `n_max >= 5` for
/// probes with at most one photon and `|mu| <= 1`. Residuals observed at
/// `n_max` 3, 4, 5 fall roughly tenfold per step, peaking at 6.7e-4 for
/// `n_max = 5`.
pub const HEISENBERG_RESIDUAL_BOUND: f64 = 1e-3;

const MODE_A: usize = 0;
const MODE_B: usize = 1;
const MODE_C: usize = 2;
const MODE_D: usize = 3;

/// Ladder operators of the system pair `(a, b)` and probe pair `(c, d)`.
#[derive(Debug, Clone)]
pub struct FourModeSystem {
    truncation: Truncation,
    pub a: DenseOperator,
    pub b: DenseOperator,
    pub c: DenseOperator,
    pub d: DenseOperator,
    /// Coupling times interaction time, in units of `hbar`.
    pub k_tau: f64,
}

impl FourModeSystem {
    pub fn new(n_max: usize) -> Result<Self> {
        if n_max == 0 || n_max > MAX_FOUR_MODE_N {
            return Err(invalid(
                "n_max",
                n_max as f64,
                "four-mode cutoff must lie in 1..=6",
            ));
        }
        let truncation = Truncation::new(n_max, 4)?;
        MemoryCap::from_env().check_dense(truncation.dim())?;
        let single = annihilator(n_max)?;
        let op = |mode| embed(&single, mode, &truncation);
        Ok(Self {
            truncation,
            a: op(MODE_A)?,
            b: op(MODE_B)?,
            c: op(MODE_C)?,
            d: op(MODE_D)?,
            k_tau: 1.0,
        })
    }

    pub fn with_k_tau(mut self, k_tau: f64) -> Self {
        self.k_tau = k_tau;
        self
    }

    pub fn truncation(&self) -> &Truncation {
        &self.truncation
    }

    /// `Z = a + b^dag`
    pub fn system_current(&self) -> Result<DenseOperator> {
        self.a.add(&self.b.adjoint())
    }

    /// `A = c + d^dag`
    pub fn probe_current(&self) -> Result<DenseOperator> {
        self.c.add(&self.d.adjoint())
    }

    /// `A^dag A` in normal order, `c^dag c + d^dag d + 1 + c^dag d^dag + d c`.
    /// The truncated product `d d^dag` vanishes on the cutoff shell instead
    /// of giving `n_max + 1`; the normal-ordered form avoids that artifact.
    pub fn probe_modulus_sq(&self) -> Result<DenseOperator> {
        let (c, d) = (&self.c, &self.d);
        let (cd, dd) = (c.adjoint(), d.adjoint());
        cd.mul(c)?
            .add(&dd.mul(d)?)?
            .add(&DenseOperator::identity(self.truncation)?)?
            .add(&cd.mul(&dd)?)?
            .add(&d.mul(c)?)
    }

    /// `H = -(i/2) [(a^dag c + b c + a d + b^dag d) - h.c.]` with unit coupling.
    pub fn hamiltonian(&self) -> Result<DenseOperator> {
        let (a, b, c, d) = (&self.a, &self.b, &self.c, &self.d);
        let x = a
            .adjoint()
            .mul(c)?
            .add(&b.mul(c)?)?
            .add(&a.mul(d)?)?
            .add(&b.adjoint().mul(d)?)?;
        x.sub(&x.adjoint())?
            .scale(c64::new(0.0, -0.5))
            .into_hermitian()
    }

    /// The same Hamiltonian written with quadratures `x_phi = (x^dag e^{i phi} + h.c.) / 2`:
    /// `Z_1 (c_{pi/2} + d_{pi/2}) - Z_2 (c_0 - d_0)`.
    pub fn hamiltonian_quadrature_form(&self) -> Result<DenseOperator> {
        let quad = |x: &DenseOperator, phi: f64| -> Result<DenseOperator> {
            let e = c64::from_polar(1.0, phi);
            x.adjoint()
                .scale(e)
                .add(&x.scale(e.conj()))?
                .into_hermitian()
                .map(|q| q.scale(c64::new(0.5, 0.0)))
        };
        let z1 = quad(&self.a, 0.0)?.add(&quad(&self.b, 0.0)?)?;
        let z2 = quad(&self.a, FRAC_PI_2)?.sub(&quad(&self.b, FRAC_PI_2)?)?;
        let p = quad(&self.c, FRAC_PI_2)?.add(&quad(&self.d, FRAC_PI_2)?)?;
        let q = quad(&self.c, 0.0)?.sub(&quad(&self.d, 0.0)?)?;
        z1.mul(&p)?.sub(&z2.mul(&q)?)?.into_hermitian()
    }
}

pub fn build_hamiltonian(sys: &FourModeSystem) -> Result<DenseOperator> {
    sys.hamiltonian()
}

/// `U = exp(-i H K_tau)`
pub fn interaction_unitary(sys: &FourModeSystem) -> Result<DenseOperator> {
    unitary_from_hamiltonian(&sys.hamiltonian()?, sys.k_tau)
}

/// Moments `<A>`, `<A^dag A>`, `<A^2>` of a complex current or outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurrentMoments {
    pub mean: c64,
    pub modulus_sq: f64,
    pub square: c64,
}

impl CurrentMoments {
    pub fn max_abs_diff(&self, other: &CurrentMoments) -> f64 {
        (self.mean - other.mean)
            .norm()
            .max((self.modulus_sq - other.modulus_sq).abs())
            .max((self.square - other.square).norm())
    }
}

/// Probe-current moments after the interaction against the moments the
/// heterodyne POM predicts for the system state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndirectReport {
    pub evolved: CurrentMoments,
    pub predicted: CurrentMoments,
    pub discrepancy: f64,
    /// Population of four-mode states with a mode at the cutoff after evolution.
    pub boundary_mass: f64,
}

/// The four-mode system with its unitary precomputed.
#[derive(Debug, Clone)]
pub struct InteractionModel {
    sys: FourModeSystem,
    unitary: DenseOperator,
}

impl InteractionModel {
    pub fn new(sys: FourModeSystem) -> Result<Self> {
        let unitary = interaction_unitary(&sys)?;
        Ok(Self { sys, unitary })
    }

    pub fn system(&self) -> &FourModeSystem {
        &self.sys
    }

    pub fn unitary(&self) -> &DenseOperator {
        &self.unitary
    }

    /// `|<psi|U^dag e^{i Re(conj(mu) A)} U|psi> - <psi|e^{i Re(conj(mu) (A + Z))}|psi>|`
    pub fn heisenberg_shift_residual(&self, psi: &KetState, mu: c64) -> Result<f64> {
        let t = &self.sys.truncation;
        if psi.truncation() != t {
            return Err(Error::DimensionMismatch {
                expected: t.dim(),
                found: psi.dim(),
            });
        }
        let limit = t.n_max() as f64 / 3.0;
        for mode in 0..4 {
            let dist = psi.mode_distribution(mode)?;
            let mean: f64 = dist.iter().enumerate().map(|(n, p)| n as f64 * p).sum();
            if mean > limit {
                return Err(Error::TruncationTooSmall(format!(
                    "mode {mode} holds {mean:.3} photons, above n_max/3 = {limit}"
                )));
            }
        }
        let a = self.sys.probe_current()?;
        let shifted = a.add(&self.sys.system_current()?)?;
        let evolved = KetState::normalized(self.unitary.apply(psi)?, *t)?;
        let lhs = characteristic(&a, &evolved, mu)?;
        let rhs = characteristic(&shifted, psi, mu)?;
        Ok((lhs - rhs).norm())
    }

    /// Evolves `rho_s (x) twin_beams(det_lambda)` and compares probe-current
    /// moments with the outcome moments of the heterodyne POM on `rho_s`.
    pub fn indirect_measurement_check(
        &self,
        rho_s: &DensityOperator,
        det_lambda: f64,
    ) -> Result<IndirectReport> {
        let t = &self.sys.truncation;
        let pair = Truncation::new(t.n_max(), 2)?;
        if rho_s.truncation() != &pair {
            return Err(Error::DimensionMismatch {
                expected: pair.dim(),
                found: rho_s.dim(),
            });
        }
        let probe = twin_beams(&TwinBeamParams::new(det_lambda)?, &pair)?;
        if probe.discarded_mass() > 1e-3 {
            return Err(Error::TruncationTooSmall(format!(
                "probe twin beam loses {:.2e} of its norm",
                probe.discarded_mass()
            )));
        }
        let rho = rho_s.tensor(&probe.to_density())?;
        let u = self.unitary.matrix();
        let evolved = DensityOperator::new(u * rho.matrix() * u.adjoint(), *t)?;
        let a = self.sys.probe_current()?;
        let moments = CurrentMoments {
            mean: evolved.expectation(&a)?,
            modulus_sq: evolved.expectation(&self.sys.probe_modulus_sq()?)?.re,
            square: evolved.expectation(&a.mul(&a)?)?,
        };
        let predicted = outcome_moments(rho_s, &DetectorParams::ideal(det_lambda)?)?;
        let n = t.n_max();
        let boundary_mass = (0..t.dim())
            .filter(|&i| t.occupations(i).contains(&n))
            .map(|i| evolved.matrix()[(i, i)].re)
            .sum();
        Ok(IndirectReport {
            evolved: moments,
            predicted,
            discrepancy: moments.max_abs_diff(&predicted),
            boundary_mass,
        })
    }
}

pub fn heisenberg_shift_residual(sys: &FourModeSystem, psi: &KetState, mu: c64) -> Result<f64> {
    InteractionModel::new(sys.clone())?.heisenberg_shift_residual(psi, mu)
}

pub fn indirect_measurement_check(
    rho_s: &DensityOperator,
    det_lambda: f64,
    sys: &FourModeSystem,
) -> Result<IndirectReport> {
    InteractionModel::new(sys.clone())?.indirect_measurement_check(rho_s, det_lambda)
}

/// `<psi| exp(i Re(conj(mu) X)) |psi>` for a current `X = X_1 + i X_2`.
fn characteristic(x: &DenseOperator, psi: &KetState, mu: c64) -> Result<c64> {
    if mu == c64::new(0.0, 0.0) {
        return Ok(c64::new(psi.norm_sqr(), 0.0));
    }
    // Re(conj(mu) X) = (conj(mu) X + mu X^dag) / 2
    let gen = x
        .scale(mu.conj())
        .add(&x.adjoint().scale(mu))?
        .scale(c64::new(0.5, 0.0))
        .into_hermitian()?;
    let eig = HermitianEigen::new(gen.matrix())?;
    let amp = psi.amplitudes();
    let out = eig.apply_to_vector(|v| c64::new(0.0, v).exp(), amp);
    Ok(amp.iter().zip(&out).map(|(p, o)| p.conj() * o).sum())
}

/// Outcome moments `E[z]`, `E[|z|^2]`, `E[z^2]` under `Tr[F(z) rho]`, by
/// radial quadrature of the angular Fourier coefficients on a larger cutoff.
pub fn outcome_moments(rho: &DensityOperator, det: &DetectorParams) -> Result<CurrentMoments> {
    let big = Truncation::new(PREDICTION_N_MAX.max(rho.truncation().n_max()), 2)?;
    let rho_big = rho.embed_into(big)?;
    let het = Heterodyne::new(*det, big)?;
    let grid = RadialGrid::covering(het.current(), det.delta_sq());
    let mut mean = c64::new(0.0, 0.0);
    let mut modulus_sq = 0.0;
    let mut square = c64::new(0.0, 0.0);
    for (r, w) in grid.nodes()? {
        let series = het.radial_density(&rho_big, r)?;
        // int e^{i k phi} P dphi = 2 pi c_{-k}
        let jac = 2.0 * PI * w * r;
        mean += series.coefficient(-1) * (jac * r);
        modulus_sq += series.coefficient(0).re * (jac * r * r);
        square += series.coefficient(-2) * (jac * r * r);
    }
    Ok(CurrentMoments {
        mean,
        modulus_sq,
        square,
    })
}

/// A named check from the restriction list of the frequency arrangement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestrictionCheck {
    pub name: String,
    pub passed: bool,
}

/// Probe and pump frequencies derived from `omega_a < omega_b` and `omega_c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyPlan {
    pub omega_a: f64,
    pub omega_b: f64,
    pub omega_c: f64,
    pub omega_d: f64,
    pub omega_xi: f64,
    pub omega_gamma: f64,
    pub restriction_checks: Vec<RestrictionCheck>,
    pub tolerance: f64,
}

impl FrequencyPlan {
    pub fn is_valid(&self) -> bool {
        self.restriction_checks.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> Vec<&str> {
        self.restriction_checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect()
    }

    pub fn frequency(&self, mode: Mode) -> f64 {
        match mode {
            Mode::A => self.omega_a,
            Mode::B => self.omega_b,
            Mode::C => self.omega_c,
            Mode::D => self.omega_d,
            Mode::Xi => self.omega_xi,
            Mode::Gamma => self.omega_gamma,
        }
    }
}

pub fn plan_frequencies(
    omega_a: f64,
    omega_b: f64,
    omega_c: f64,
    tol: f64,
) -> Result<FrequencyPlan> {
    for (name, v) in [
        ("omega_a", omega_a),
        ("omega_b", omega_b),
        ("omega_c", omega_c),
    ] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(invalid(name, v, "must be positive and finite"));
        }
    }
    if !(omega_a < omega_b) {
        return Err(invalid("omega_b", omega_b, "must exceed omega_a"));
    }
    if !(tol >= 0.0) {
        return Err(invalid("tol", tol, "must be non-negative"));
    }
    let (wa, wb, wc) = (omega_a, omega_b, omega_c);
    let differs = |lhs: f64, rhs: f64| (lhs - rhs).abs() > tol;
    let mut checks = vec![
        ("omega_b != 2 omega_a", differs(wb, 2.0 * wa)),
        ("omega_c > omega_b", wc - wb > tol),
    ];
    for (name, v) in [
        ("omega_c != 3/2 omega_a", 1.5 * wa),
        ("omega_c != 2 omega_a", 2.0 * wa),
        ("omega_c != omega_a + omega_b/2", wa + 0.5 * wb),
        ("omega_c != omega_a + omega_b", wa + wb),
        ("omega_c != 2 omega_a + omega_b", 2.0 * wa + wb),
    ] {
        checks.push((name, differs(wc, v)));
    }
    Ok(FrequencyPlan {
        omega_a,
        omega_b,
        omega_c,
        omega_d: wc + wb - wa,
        omega_xi: wc - wa,
        omega_gamma: wc + wb,
        restriction_checks: checks
            .into_iter()
            .map(|(name, passed)| RestrictionCheck {
                name: name.to_string(),
                passed,
            })
            .collect(),
        tolerance: tol,
    })
}

/// Field modes `a, b, c, d` and pumps `xi, gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    A,
    B,
    C,
    D,
    Xi,
    Gamma,
}

impl Mode {
    pub const ALL: [Mode; 6] = [Mode::A, Mode::B, Mode::C, Mode::D, Mode::Xi, Mode::Gamma];

    fn symbol(self) -> &'static str {
        match self {
            Mode::A => "a",
            Mode::B => "b",
            Mode::C => "c",
            Mode::D => "d",
            Mode::Xi => "xi",
            Mode::Gamma => "gamma",
        }
    }
}

/// A ladder operator: annihilation, or creation when `dagger` is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Ladder {
    pub mode: Mode,
    pub dagger: bool,
}

impl Ladder {
    pub fn new(mode: Mode, dagger: bool) -> Self {
        Self { mode, dagger }
    }

    /// Frequency picked up in the interaction picture: `+omega` for a
    /// creation operator, `-omega` for an annihilation operator.
    fn signed_frequency(self, plan: &FrequencyPlan) -> f64 {
        let w = plan.frequency(self.mode);
        if self.dagger {
            w
        } else {
            -w
        }
    }
}

/// Product of three ladder operators on distinct modes, kept sorted by mode.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Term(pub [Ladder; 3]);

impl Term {
    pub fn new(mut ops: [Ladder; 3]) -> Self {
        ops.sort();
        Self(ops)
    }

    pub fn adjoint(&self) -> Self {
        Self::new(self.0.map(|l| Ladder::new(l.mode, !l.dagger)))
    }

    pub fn frequency_sum(&self, plan: &FrequencyPlan) -> f64 {
        self.0.iter().map(|l| l.signed_frequency(plan)).sum()
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|l| format!("{}{}", l.mode.symbol(), if l.dagger { "^dag" } else { "" }))
            .collect();
        write!(f, "{}", parts.join(" "))
    }
}

/// Every product of three ladder operators on three distinct modes among
/// the four fields and two pumps (160 terms). This contains the products
/// of two distinct field operators with one pump, and also the field-only
/// and two-pump products behind the restriction list.
pub fn term_space() -> Vec<Term> {
    let mut out = Vec::with_capacity(160);
    for i in 0..6 {
        for j in i + 1..6 {
            for k in j + 1..6 {
                for mask in 0..8u8 {
                    let l = |m: usize, bit: u8| Ladder::new(Mode::ALL[m], mask & bit != 0);
                    out.push(Term::new([l(i, 1), l(j, 2), l(k, 4)]));
                }
            }
        }
    }
    out
}

/// Terms of `term_space` whose frequency sum vanishes within the plan's tolerance.
pub fn surviving_terms(plan: &FrequencyPlan) -> BTreeSet<Term> {
    term_space()
        .into_iter()
        .filter(|t| t.frequency_sum(plan).abs() <= plan.tolerance)
        .collect()
}

/// `a^dag c xi^dag + b^dag d xi^dag + a d gamma^dag + b c gamma^dag` and h.c.
pub fn expected_terms() -> BTreeSet<Term> {
    use Mode::*;
    let t = |x: (Mode, bool), y: (Mode, bool), z: (Mode, bool)| {
        Term::new([
            Ladder::new(x.0, x.1),
            Ladder::new(y.0, y.1),
            Ladder::new(z.0, z.1),
        ])
    };
    let base = [
        t((A, true), (C, false), (Xi, true)),
        t((B, true), (D, false), (Xi, true)),
        t((A, false), (D, false), (Gamma, true)),
        t((B, false), (C, false), (Gamma, true)),
    ];
    base.iter().flat_map(|t| [t.clone(), t.adjoint()]).collect()
}

/// Surviving set of a valid plan. Invalid plans are rejected with the
/// names of the failed restrictions.
pub fn resonant_terms(plan: &FrequencyPlan) -> Result<BTreeSet<Term>> {
    if !plan.is_valid() {
        return Err(Error::InvalidPlan(
            plan.failed().into_iter().map(String::from).collect(),
        ));
    }
    Ok(surviving_terms(plan))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn hamiltonian_forms_agree_and_are_hermitian() {
        let sys = FourModeSystem::new(2).unwrap();
        let h = sys.hamiltonian().unwrap();
        let h2 = sys.hamiltonian_quadrature_form().unwrap();
        assert!(h.hermitian_residual() < 1e-12);
        assert!(h.max_abs_diff(&h2).unwrap() < 1e-12);
        let vac = KetState::vacuum(*sys.truncation());
        assert!(h.expectation(&vac).unwrap().norm() < 1e-15);
    }

    #[test]
    fn normal_ordered_modulus_matches_product_below_shell() {
        let sys = FourModeSystem::new(3).unwrap();
        let a = sys.probe_current().unwrap();
        let naive = a.adjoint().mul(&a).unwrap();
        let normal = sys.probe_modulus_sq().unwrap();
        let inner = sys.truncation().block_indices(2);
        assert!(normal.block_max_abs_diff(&naive, &inner).unwrap() < 1e-12);
        // on the shell the truncated d d^dag drops a unit
        let top = KetState::basis(*sys.truncation(), &[0, 0, 0, 3]).unwrap();
        let gap = normal.expectation(&top).unwrap() - naive.expectation(&top).unwrap();
        assert!((gap.re - 4.0).abs() < 1e-12, "{gap}");
    }

    #[test]
    fn hamiltonian_breaks_photon_number() {
        let sys = FourModeSystem::new(2).unwrap();
        let h = sys.hamiltonian().unwrap();
        let mut n_total = DenseOperator::zeros(*sys.truncation()).unwrap();
        for x in [&sys.a, &sys.b, &sys.c, &sys.d] {
            n_total = n_total.add(&x.adjoint().mul(x).unwrap()).unwrap();
        }
        assert!(h.commutator(&n_total).unwrap().max_abs() > 0.1);
    }

    #[test]
    fn zero_coupling_gives_identity() {
        let sys = FourModeSystem::new(2).unwrap().with_k_tau(0.0);
        let u = interaction_unitary(&sys).unwrap();
        let id = DenseOperator::identity(*sys.truncation()).unwrap();
        assert!(u.max_abs_diff(&id).unwrap() < 1e-12);
    }

    #[test]
    fn unitary_matches_dyson_series() {
        let sys = FourModeSystem::new(2).unwrap().with_k_tau(0.01);
        let u = interaction_unitary(&sys).unwrap();
        let h = sys.hamiltonian().unwrap().scale(c64::new(0.01, 0.0));
        let id = DenseOperator::identity(*sys.truncation()).unwrap();
        let series = id
            .sub(&h.scale(c64::new(0.0, 1.0)))
            .unwrap()
            .sub(&h.mul(&h).unwrap().scale(c64::new(0.5, 0.0)))
            .unwrap();
        assert!(u.max_abs_diff(&series).unwrap() < 1e-5);
    }

    #[test]
    fn characteristic_residual_vanishes_at_zero() {
        let model = InteractionModel::new(FourModeSystem::new(2).unwrap()).unwrap();
        let vac = KetState::vacuum(*model.system().truncation());
        assert_eq!(
            model
                .heisenberg_shift_residual(&vac, c64::new(0.0, 0.0))
                .unwrap(),
            0.0
        );
    }

    #[test]
    fn energetic_state_rejected() {
        let model = InteractionModel::new(FourModeSystem::new(2).unwrap()).unwrap();
        let t = *model.system().truncation();
        let psi = KetState::basis(t, &[2, 0, 0, 0]).unwrap();
        assert!(matches!(
            model.heisenberg_shift_residual(&psi, c64::new(1.0, 0.0)),
            Err(Error::TruncationTooSmall(_))
        ));
    }

    #[test]
    fn cutoff_limit() {
        assert!(FourModeSystem::new(7).is_err());
        assert!(FourModeSystem::new(0).is_err());
    }

    #[test]
    fn vacuum_outcome_moments() {
        let t = Truncation::new(3, 2).unwrap();
        let rho = KetState::vacuum(t).to_density();
        for lambda in [0.0, 0.5] {
            let det = DetectorParams::ideal(lambda).unwrap();
            let m = outcome_moments(&rho, &det).unwrap();
            // Vacuum: <Z^dag Z> = 1 and the detector adds Delta^2.
            assert!(m.mean.norm() < 1e-8);
            assert!(
                (m.modulus_sq - (1.0 + det.delta_sq())).abs() < 1e-4,
                "{}",
                m.modulus_sq
            );
            assert!(m.square.norm() < 1e-8);
        }
    }

    #[test]
    fn plan_arithmetic() {
        let p = plan_frequencies(1.0, 3.0, 4.5, DEFAULT_FREQUENCY_TOL).unwrap();
        assert!(p.is_valid());
        assert!(rel(p.omega_d, 6.5) && rel(p.omega_xi, 3.5) && rel(p.omega_gamma, 7.5));
        let p = plan_frequencies(1.0, 3.0, 4.0, DEFAULT_FREQUENCY_TOL).unwrap();
        assert_eq!(p.failed(), vec!["omega_c != omega_a + omega_b"]);
        let p = plan_frequencies(1.0, 2.0, 5.0, DEFAULT_FREQUENCY_TOL).unwrap();
        assert_eq!(p.failed(), vec!["omega_b != 2 omega_a"]);
        let p = plan_frequencies(1.0, 3.0, 2.5, DEFAULT_FREQUENCY_TOL).unwrap();
        assert!(p.failed().contains(&"omega_c > omega_b"));
        assert!(plan_frequencies(3.0, 1.0, 4.0, 1e-9).is_err());
    }

    #[test]
    fn surviving_terms_of_valid_plan() {
        let p = plan_frequencies(1.0, 3.0, 4.5, DEFAULT_FREQUENCY_TOL).unwrap();
        assert_eq!(term_space().len(), 160);
        assert_eq!(resonant_terms(&p).unwrap(), expected_terms());
        for t in expected_terms() {
            assert!(t.frequency_sum(&p).abs() < 1e-12, "{t}");
        }
    }

    #[test]
    fn degenerate_plans_admit_extra_resonances() {
        for (wa, wb, wc) in [(1.0, 3.0, 4.0), (1.0, 2.0, 5.0)] {
            let p = plan_frequencies(wa, wb, wc, DEFAULT_FREQUENCY_TOL).unwrap();
            assert!(matches!(resonant_terms(&p), Err(Error::InvalidPlan(_))));
            let found = surviving_terms(&p);
            assert!(found.is_superset(&expected_terms()));
            assert!(found.len() > expected_terms().len());
        }
    }

    #[test]
    fn valid_rational_plans_keep_only_expected_terms() {
        for ia in 1..=6 {
            for ib in ia + 1..=14 {
                for ic in 1..=40 {
                    let (wa, wb, wc) = (ia as f64 / 2.0, ib as f64 / 2.0, ic as f64 / 2.0);
                    let p = plan_frequencies(wa, wb, wc, DEFAULT_FREQUENCY_TOL).unwrap();
                    if p.is_valid() {
                        assert_eq!(surviving_terms(&p), expected_terms(), "{wa} {wb} {wc}");
                    }
                }
            }
        }
    }

    #[test]
    fn term_display() {
        let t = Term::new([
            Ladder::new(Mode::Xi, true),
            Ladder::new(Mode::A, true),
            Ladder::new(Mode::C, false),
        ]);
        assert_eq!(t.to_string(), "a^dag c xi^dag");
    }
}
