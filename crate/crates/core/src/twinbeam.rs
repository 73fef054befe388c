//! Twin-beam and displaced twin-beam probe states.

use serde::{Deserialize, Serialize};

use crate::c64;
use crate::error::{invalid, Error, Result};
use crate::fock::{single_mode_displacement, KetState, Truncation};

/// Tail-mass target used to pick a default cutoff.
pub const DEFAULT_TAIL_MASS: f64 = 1e-8;

/// Parametric-amplifier parameter `lambda` of a twin beam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct TwinBeamParams {
    lambda: f64,
}

impl TwinBeamParams {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&lambda) {
            return Err(invalid("lambda", lambda, "must lie in [0, 1)"));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `1 / (1 - lambda^2)`
    pub fn gain(&self) -> f64 {
        1.0 / (1.0 - self.lambda * self.lambda)
    }

    /// Smallest cutoff whose geometric tail `lambda^(2(n+1))` is below `tail`.
    pub fn default_n_max(&self, tail: f64) -> usize {
        if self.lambda == 0.0 {
            return 0;
        }
        (tail.ln() / (2.0 * self.lambda.ln())).ceil().max(0.0) as usize
    }
}

impl TryFrom<f64> for TwinBeamParams {
    type Error = Error;
    fn try_from(lambda: f64) -> Result<Self> {
        Self::new(lambda)
    }
}

impl From<TwinBeamParams> for f64 {
    fn from(p: TwinBeamParams) -> f64 {
        p.lambda
    }
}

/// Twin beam displaced by `w` on the signal mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisplacedTwinBeamParams {
    pub base: TwinBeamParams,
    pub w: c64,
}

impl DisplacedTwinBeamParams {
    pub fn new(lambda: f64, w: c64) -> Result<Self> {
        if !(w.re.is_finite() && w.im.is_finite()) {
            return Err(invalid("w", w.norm(), "must be finite"));
        }
        Ok(Self {
            base: TwinBeamParams::new(lambda)?,
            w,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.base.lambda
    }

    /// `arg(w)` in `(-pi, pi]`.
    pub fn theta(&self) -> f64 {
        self.w.arg()
    }

    /// Cutoff that keeps the displaced state well inside the truncation.
    pub fn default_n_max(&self) -> usize {
        let tail = self.base.default_n_max(DEFAULT_TAIL_MASS);
        let n = mean_photons_closed_form(self);
        tail.max((2.0 * n).ceil() as usize) + (6.0 * self.w.norm()).ceil() as usize + 4
    }
}

fn check_two_mode(truncation: &Truncation) -> Result<()> {
    if truncation.n_modes() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            found: truncation.n_modes(),
        });
    }
    Ok(())
}

/// `sqrt(1 - lambda^2) sum_n (-lambda)^n |n, n>`, renormalized on the truncation.
///
/// The probability discarded by the cutoff is reported by `discarded_mass`.
pub fn twin_beams(params: &TwinBeamParams, truncation: &Truncation) -> Result<KetState> {
    check_two_mode(truncation)?;
    let lambda = params.lambda;
    let norm = (1.0 - lambda * lambda).sqrt();
    let mut amplitudes = vec![c64::new(0.0, 0.0); truncation.dim()];
    let mut amp = norm;
    for n in 0..=truncation.n_max() {
        amplitudes[truncation.index(&[n, n])?] = c64::new(amp, 0.0);
        amp *= -lambda;
    }
    let discarded = (lambda * lambda).powi(truncation.n_max() as i32 + 1);
    let state = KetState::normalized(amplitudes, *truncation)?;
    Ok(state.with_discarded_mass(discarded))
}

/// `D_a(w)` applied to the twin beam.
///
/// Accurate only while the mean photon number stays well below `n_max / 2`.
pub fn displaced_twin_beams(
    params: &DisplacedTwinBeamParams,
    truncation: &Truncation,
) -> Result<KetState> {
    let base = twin_beams(&params.base, truncation)?;
    if params.w == c64::new(0.0, 0.0) {
        return Ok(base);
    }
    let bound = truncation.n_max() as f64 / 2.0;
    if mean_photons_closed_form(params) > bound {
        return Err(Error::TruncationTooSmall(format!(
            "mean photon number {:.3} exceeds n_max/2 = {bound}",
            mean_photons_closed_form(params)
        )));
    }
    let d = single_mode_displacement(params.w, truncation.n_max())?;
    let displaced = base.apply_mode_matrix(d.matrix(), 0)?;
    let state = KetState::normalized(displaced, *truncation)?;
    // Weight pushed onto the cutoff shell is a proxy for what the truncated
    // exponential failed to represent.
    let boundary = state.boundary_mass();
    Ok(state.with_discarded_mass(base.discarded_mass() + boundary))
}

/// `|w|^2 + 2 lambda^2 / (1 - lambda^2)`
pub fn mean_photons_closed_form(params: &DisplacedTwinBeamParams) -> f64 {
    let l2 = params.lambda() * params.lambda();
    params.w.norm_sqr() + 2.0 * l2 / (1.0 - l2)
}

/// `<a^dag a + b^dag b>` on a two-mode state.
pub fn mean_photons_numeric(state: &KetState) -> Result<f64> {
    let t = state.truncation();
    check_two_mode(t)?;
    Ok(state
        .amplitudes()
        .iter()
        .enumerate()
        .map(|(i, a)| (t.occupation(i, 0) + t.occupation(i, 1)) as f64 * a.norm_sqr())
        .sum())
}

/// Displaced twin beam with `|w|^2 = n_bar / 2` and `lambda = 1 - 2 / n_bar`.
pub fn optimal_split(n_bar: f64, phase: f64) -> Result<DisplacedTwinBeamParams> {
    if !(n_bar > 2.0) || !n_bar.is_finite() {
        return Err(invalid("n_bar", n_bar, "the optimum requires n_bar > 2"));
    }
    let lambda = 1.0 - 2.0 / n_bar;
    DisplacedTwinBeamParams::new(lambda, c64::from_polar((n_bar / 2.0).sqrt(), phase))
}
