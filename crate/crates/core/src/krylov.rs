//! Matrix-free heterodyne operations on pure states.
//!
//! Dense operators stop being practical beyond a few hundred basis states
//! per mode pair, while repeated measurements drive states toward large
//! photon numbers. Here `Z` is kept as a sparse operator and the Kraus
//! action `exp(-M(r) / 2 Delta^2)` is applied to a vector by Lanczos.

use faer::Mat;

use crate::c64;
use crate::error::{invalid, Error, Result};
use crate::fock::{KetState, Truncation};
use crate::povm::{DetectorParams, HeterodyneOutcome, RadialGrid, DENSITY_FLOOR};

/// Relative accuracy requested from the Lanczos exponential.
pub const EXPM_TOL: f64 = 1e-12;
/// Largest Krylov subspace before the exponential is declared unconverged.
pub const MAX_KRYLOV_DIM: usize = 200;
/// Lanczos steps between convergence checks.
const CHECK_EVERY: usize = 4;
/// Accuracy of outcome densities from Lanczos quadrature, relative to the
/// peak value `1 / (pi Delta^2)`.
pub const DENSITY_TOL: f64 = 1e-9;

/// `Z = a_s + a_i^dag` stored column-wise, at most two entries per column.
#[derive(Debug, Clone)]
pub struct SparseCurrent {
    truncation: Truncation,
    lower: Vec<Option<(usize, f64)>>,
    raise: Vec<Option<(usize, f64)>>,
    charge: Vec<i32>,
}

impl SparseCurrent {
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
        let n_max = truncation.n_max();
        let (ss, si) = (truncation.stride(signal), truncation.stride(image));
        let mut lower = Vec::with_capacity(d);
        let mut raise = Vec::with_capacity(d);
        let mut charge = Vec::with_capacity(d);
        for j in 0..d {
            let ns = truncation.occupation(j, signal);
            let ni = truncation.occupation(j, image);
            charge.push(ns as i32 - ni as i32);
            lower.push((ns > 0).then(|| (j - ss, (ns as f64).sqrt())));
            raise.push((ni < n_max).then(|| (j + si, ((ni + 1) as f64).sqrt())));
        }
        Ok(Self {
            truncation,
            lower,
            raise,
            charge,
        })
    }

    pub fn truncation(&self) -> &Truncation {
        &self.truncation
    }

    pub fn charge(&self) -> &[i32] {
        &self.charge
    }

    pub fn norm_bound(&self) -> f64 {
        2.0 * (self.truncation.n_max() as f64).sqrt()
    }

    /// `out = Z x`
    pub fn apply(&self, x: &[c64], out: &mut [c64]) {
        out.iter_mut().for_each(|o| *o = c64::new(0.0, 0.0));
        for (j, &xj) in x.iter().enumerate() {
            if let Some((i, v)) = self.lower[j] {
                out[i] += xj * v;
            }
            if let Some((i, v)) = self.raise[j] {
                out[i] += xj * v;
            }
        }
    }

    /// `out = Z^T x`
    pub fn apply_transpose(&self, x: &[c64], out: &mut [c64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = c64::new(0.0, 0.0);
            if let Some((i, v)) = self.lower[j] {
                acc += x[i] * v;
            }
            if let Some((i, v)) = self.raise[j] {
                acc += x[i] * v;
            }
            *o = acc;
        }
    }

    /// `out = M(r) x` with `M(r) = (Z - r)^T (Z - r)`.
    pub fn apply_generator(&self, r: f64, x: &[c64], out: &mut [c64], scratch: &mut [c64]) {
        self.apply(x, scratch);
        for (s, xi) in scratch.iter_mut().zip(x) {
            *s -= xi * r;
        }
        self.apply_transpose(scratch, out);
        for (o, s) in out.iter_mut().zip(scratch.iter()) {
            *o -= s * r;
        }
    }

    /// Multiplies each amplitude by `exp(i phi k)`, i.e. applies `R(phi)`.
    pub fn rotate(&self, x: &mut [c64], phi: f64) {
        let n = self.truncation.n_max() as i32;
        let table: Vec<c64> = (-n..=n)
            .map(|k| c64::from_polar(1.0, phi * k as f64))
            .collect();
        for (xi, &k) in x.iter_mut().zip(&self.charge) {
            *xi *= table[(k + n) as usize];
        }
    }

    /// `<psi|Z|psi>`, `<psi|Z^T Z|psi>` and `<psi|Z Z|psi>`.
    pub fn moments(&self, psi: &[c64]) -> (c64, f64, c64) {
        let mut zpsi = vec![c64::new(0.0, 0.0); psi.len()];
        let mut zzpsi = vec![c64::new(0.0, 0.0); psi.len()];
        self.apply(psi, &mut zpsi);
        self.apply(&zpsi, &mut zzpsi);
        let dot =
            |a: &[c64], b: &[c64]| -> c64 { a.iter().zip(b).map(|(x, y)| x.conj() * y).sum() };
        (dot(psi, &zpsi), dot(&zpsi, &zpsi).re, dot(psi, &zzpsi))
    }
}

/// `exp(-t A) v` for a Hermitian positive semidefinite `A` given as a
/// matrix-free product, by Lanczos.
pub fn expm_neg_apply<F>(mut apply: F, v: &[c64], t: f64, tol: f64) -> Result<Vec<c64>>
where
    F: FnMut(&[c64], &mut [c64]),
{
    let d = v.len();
    let beta0 = norm(v);
    if beta0 == 0.0 {
        return Ok(v.to_vec());
    }
    let max_m = MAX_KRYLOV_DIM.min(d);
    let mut basis: Vec<Vec<c64>> = vec![v.iter().map(|x| x / beta0).collect()];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut w = vec![c64::new(0.0, 0.0); d];
    loop {
        let m = basis.len();
        apply(&basis[m - 1], &mut w);
        let a = basis[m - 1]
            .iter()
            .zip(&w)
            .map(|(q, x)| (q.conj() * x).re)
            .sum::<f64>();
        alpha.push(a);
        // Three-term recurrence; a decaying exponential tolerates the slow
        // loss of orthogonality.
        let prev_beta = beta.last().copied().unwrap_or(0.0);
        for (i, wi) in w.iter_mut().enumerate() {
            *wi -= basis[m - 1][i] * a;
            if m > 1 {
                *wi -= basis[m - 2][i] * prev_beta;
            }
        }
        let b = norm(&w);
        let exhausted = b <= tol * a.abs().max(1.0);
        if m % CHECK_EVERY != 0 && !exhausted && m < max_m {
            beta.push(b);
            basis.push(w.iter().map(|x| x / b).collect());
            continue;
        }
        let coeffs = tridiagonal_expm_first_column(&alpha, &beta, t)?;
        let err = b * coeffs[m - 1].abs();
        if err <= tol || exhausted || m == max_m {
            if err > tol && !exhausted {
                return Err(Error::Eigensolver(format!(
                    "Lanczos exponential unconverged after {m} steps (estimate {err:e})"
                )));
            }
            let mut out = vec![c64::new(0.0, 0.0); d];
            for (q, &c) in basis.iter().zip(&coeffs) {
                for (o, qi) in out.iter_mut().zip(q) {
                    *o += qi * (c * beta0);
                }
            }
            return Ok(out);
        }
        beta.push(b);
        basis.push(w.iter().map(|x| x / b).collect());
    }
}

/// `<v|exp(-t A)|v>` for a Hermitian positive semidefinite `A`, by Lanczos
/// (Gauss) quadrature, to absolute accuracy `tol <v|v>`. Only two Krylov
/// vectors are kept.
pub fn expm_neg_quadratic_form<F>(mut apply: F, v: &[c64], t: f64, tol: f64) -> Result<f64>
where
    F: FnMut(&[c64], &mut [c64]),
{
    let d = v.len();
    let beta0_sq: f64 = v.iter().map(|x| x.norm_sqr()).sum();
    if beta0_sq == 0.0 {
        return Ok(0.0);
    }
    let beta0 = beta0_sq.sqrt();
    let max_m = MAX_KRYLOV_DIM.min(d);
    let mut prev: Vec<c64> = vec![c64::new(0.0, 0.0); d];
    let mut cur: Vec<c64> = v.iter().map(|x| x / beta0).collect();
    let mut w = vec![c64::new(0.0, 0.0); d];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut last = f64::NAN;
    loop {
        let m = alpha.len() + 1;
        apply(&cur, &mut w);
        let a = cur
            .iter()
            .zip(&w)
            .map(|(q, x)| (q.conj() * x).re)
            .sum::<f64>();
        alpha.push(a);
        let pb = beta.last().copied().unwrap_or(0.0);
        for ((wi, ci), pi) in w.iter_mut().zip(&cur).zip(&prev) {
            *wi -= ci * a + pi * pb;
        }
        let b = norm(&w);
        let exhausted = b <= tol * a.abs().max(1.0);
        if m % CHECK_EVERY == 0 || exhausted || m == max_m {
            let est = tridiagonal_expm_first_column(&alpha, &beta, t)?[0] * beta0_sq;
            if exhausted || (est - last).abs() <= tol * beta0_sq {
                return Ok(est);
            }
            if m == max_m {
                return Err(Error::Eigensolver(format!(
                    "Lanczos quadrature unconverged after {m} steps"
                )));
            }
            last = est;
        }
        beta.push(b);
        std::mem::swap(&mut prev, &mut cur);
        for (ci, wi) in cur.iter_mut().zip(&w) {
            *ci = wi / b;
        }
    }
}

fn norm(v: &[c64]) -> f64 {
    v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

/// First column of `exp(-t T)` for the symmetric tridiagonal `T`.
fn tridiagonal_expm_first_column(alpha: &[f64], beta: &[f64], t: f64) -> Result<Vec<f64>> {
    let m = alpha.len();
    let tri = Mat::<f64>::from_fn(m, m, |i, j| {
        if i == j {
            alpha[i]
        } else if i + 1 == j {
            beta[i]
        } else if j + 1 == i {
            beta[j]
        } else {
            0.0
        }
    });
    let eig = tri
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| Error::Eigensolver(format!("{e:?}")))?;
    let (vals, vecs) = (eig.S(), eig.U());
    let shift = (0..m).map(|k| vals[k]).fold(f64::INFINITY, f64::min);
    Ok((0..m)
        .map(|i| {
            (0..m)
                .map(|k| vecs[(i, k)] * vecs[(0, k)] * (-t * (vals[k] - shift)).exp())
                .sum::<f64>()
                * (-t * shift).exp()
        })
        .collect())
}

/// Ideal heterodyne instrument acting on kets through `SparseCurrent`.
#[derive(Debug, Clone)]
pub struct KetHeterodyne {
    current: SparseCurrent,
    det: DetectorParams,
}

impl KetHeterodyne {
    /// Signal on mode 0 and image on mode 1.
    pub fn new(det: DetectorParams, truncation: Truncation) -> Result<Self> {
        Ok(Self {
            current: SparseCurrent::new(truncation, (0, 1))?,
            det,
        })
    }

    pub fn detector(&self) -> &DetectorParams {
        &self.det
    }

    pub fn current(&self) -> &SparseCurrent {
        &self.current
    }

    /// `exp(-M(|z|) / 2 Delta^2) R(arg z)^dag psi`, before the final rotation
    /// and the `1 / (sqrt(pi) Delta)` prefactor.
    fn filtered(&self, psi: &[c64], z: c64) -> Result<Vec<c64>> {
        let (r, phi) = z.to_polar();
        let mut v = psi.to_vec();
        self.current.rotate(&mut v, -phi);
        let mut scratch = vec![c64::new(0.0, 0.0); v.len()];
        let t = 0.5 / self.det.delta_sq();
        expm_neg_apply(
            |x, out| self.current.apply_generator(r, x, out, &mut scratch),
            &v,
            t,
            EXPM_TOL,
        )
    }

    /// `<psi|F(z)|psi>`
    pub fn outcome_density(&self, psi: &KetState, z: c64) -> Result<f64> {
        self.check(psi)?;
        let (r, phi) = z.to_polar();
        let mut v = psi.amplitudes().to_vec();
        self.current.rotate(&mut v, -phi);
        let mut scratch = vec![c64::new(0.0, 0.0); v.len()];
        let ds = self.det.delta_sq();
        let q = expm_neg_quadratic_form(
            |x, out| self.current.apply_generator(r, x, out, &mut scratch),
            &v,
            1.0 / ds,
            DENSITY_TOL,
        )?;
        Ok(q / (std::f64::consts::PI * ds))
    }

    /// Densities on a ring of radius `r` at each angle.
    pub fn ring_densities(&self, psi: &KetState, r: f64, angles: &[f64]) -> Result<Vec<f64>> {
        angles
            .iter()
            .map(|&phi| self.outcome_density(psi, c64::from_polar(r, phi)))
            .collect()
    }

    /// Phase density `int P(r, phi) r dr` at each angle, over the radii of `grid`.
    pub fn phase_densities(
        &self,
        psi: &KetState,
        grid: &RadialGrid,
        angles: &[f64],
    ) -> Result<Vec<f64>> {
        let mut out = vec![0.0; angles.len()];
        for (r, w) in grid.nodes()? {
            for (acc, p) in out.iter_mut().zip(self.ring_densities(psi, r, angles)?) {
                *acc += p * r * w;
            }
        }
        Ok(out)
    }

    /// Normalized `K(z) psi` together with the outcome density. Finite
    /// efficiency mixes the state, so only `eta = 1` is accepted.
    pub fn reduce(&self, psi: &KetState, z: c64) -> Result<(KetState, HeterodyneOutcome)> {
        self.check(psi)?;
        if !self.det.is_ideal() {
            return Err(invalid(
                "eta",
                self.det.eta(),
                "pure-state reduction requires unit efficiency",
            ));
        }
        let mut u = self.filtered(psi.amplitudes(), z)?;
        let p = norm(&u).powi(2) / (std::f64::consts::PI * self.det.delta_sq());
        if !(p > DENSITY_FLOOR) {
            return Err(Error::DensityBelowFloor {
                density: p,
                floor: DENSITY_FLOOR,
            });
        }
        self.current.rotate(&mut u, z.arg());
        let state = KetState::normalized(u, *psi.truncation())?;
        Ok((state, HeterodyneOutcome::new(z, p)))
    }

    fn check(&self, psi: &KetState) -> Result<()> {
        if psi.truncation() != self.current.truncation() {
            return Err(Error::DimensionMismatch {
                expected: self.current.truncation().dim(),
                found: psi.amplitudes().len(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::DensityOperator;
    use crate::povm::Heterodyne;
    use crate::twinbeam::{displaced_twin_beams, DisplacedTwinBeamParams};

    fn probe(n: usize) -> KetState {
        let t = Truncation::new(n, 2).unwrap();
        displaced_twin_beams(
            &DisplacedTwinBeamParams::new(0.5, c64::new(0.8, -0.3)).unwrap(),
            &t,
        )
        .unwrap()
    }

    #[test]
    fn sparse_current_matches_dense() {
        let psi = probe(6);
        let t = *psi.truncation();
        let dense = crate::povm::current_operator(&t, (0, 1)).unwrap();
        let sparse = SparseCurrent::new(t, (0, 1)).unwrap();
        let rho: DensityOperator = psi.to_density();
        let (m, m2, msq) = sparse.moments(psi.amplitudes());
        assert!((m - dense.mean(&rho).unwrap()).norm() < 1e-12);
        assert!((m2 - dense.mean_modulus_sq(&rho).unwrap()).abs() < 1e-12);
        assert!((msq - dense.mean_square(&rho).unwrap()).norm() < 1e-12);
    }

    #[test]
    fn density_and_reduction_match_dense_path() {
        let psi = probe(7);
        let t = *psi.truncation();
        let det = DetectorParams::ideal(0.4).unwrap();
        let dense = Heterodyne::new(det, t).unwrap();
        let ket = KetHeterodyne::new(det, t).unwrap();
        let rho = psi.to_density();
        for &z in &[c64::new(0.9, -0.2), c64::new(-0.4, 1.3), c64::new(0.0, 0.0)] {
            let p_dense = dense.outcome_density(&rho, z).unwrap();
            let p_ket = ket.outcome_density(&psi, z).unwrap();
            assert!(
                (p_dense - p_ket).abs() < 1e-11 * p_dense.max(1.0),
                "{p_dense} {p_ket}"
            );
            let reduced = dense.reduce_state(&rho, z).unwrap().state;
            let (after, _) = ket.reduce(&psi, z).unwrap();
            let diff = reduced.matrix() - after.to_density().matrix();
            let worst = (0..t.dim())
                .flat_map(|i| (0..t.dim()).map(move |j| (i, j)))
                .map(|(i, j)| diff[(i, j)].norm())
                .fold(0.0, f64::max);
            assert!(worst < 1e-10, "{worst}");
        }
    }

    #[test]
    fn exponential_of_diagonal_operator() {
        let diag: Vec<f64> = (0..50).map(|k| 0.7 * k as f64).collect();
        let v: Vec<c64> = (0..50).map(|k| c64::new(1.0, 0.1 * k as f64)).collect();
        let out = expm_neg_apply(
            |x, o| {
                for ((oi, xi), di) in o.iter_mut().zip(x).zip(&diag) {
                    *oi = xi * di;
                }
            },
            &v,
            1.3,
            1e-14,
        )
        .unwrap();
        for k in 0..50 {
            let want = v[k] * (-1.3 * diag[k]).exp();
            assert!((out[k] - want).norm() < 1e-12, "{k}");
        }
    }

    #[test]
    fn finite_efficiency_densities_but_no_reduction() {
        let psi = probe(6);
        let t = *psi.truncation();
        let det = DetectorParams::new(0.5, 0.8).unwrap();
        let ket = KetHeterodyne::new(det, t).unwrap();
        let dense = Heterodyne::new(det, t).unwrap();
        let z = c64::new(0.7, 0.4);
        let p = ket.outcome_density(&psi, z).unwrap();
        let q = dense.outcome_density(&psi.to_density(), z).unwrap();
        assert!((p - q).abs() < 1e-9, "{p} {q}");
        assert!(ket.reduce(&psi, z).is_err());
    }
}
