//! Shared inputs for the benchmarks.

use hetphase_core::twinbeam::displaced_twin_beams;
use hetphase_core::{c64, DisplacedTwinBeamParams, KetState, Result, Truncation};

/// Displaced twin beam at `lambda = 0.6`, `w = 1`, on an `n_max` cutoff.
pub fn reference_state(n_max: usize) -> Result<KetState> {
    let p = DisplacedTwinBeamParams::new(0.6, c64::new(1.0, 0.0))?;
    displaced_twin_beams(&p, &Truncation::new(n_max, 2)?)
}

/// `count` equally spaced angles on `[-pi, pi)`.
pub fn angles(count: usize) -> Vec<f64> {
    use std::f64::consts::PI;
    (0..count)
        .map(|k| -PI + 2.0 * PI * k as f64 / count as f64)
        .collect()
}
