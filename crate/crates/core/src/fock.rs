//! Dense complex linear algebra over truncated multimode bosonic Fock spaces.
//!
//! Basis vectors are ordered lexicographically in the occupations
//! `(n_1, ..., n_k)`, with mode 0 the most significant digit. This order is
//! part of every serialized format and never changes.

use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::{c64, CMat};

/// Tolerance on `max|M - M^dag|` for the Hermitian flag.
pub const HERMITIAN_TOL: f64 = 1e-10;
/// Tolerance on `max|U^dag U - I|` for the unitary flag.
pub const UNITARY_TOL: f64 = 1e-8;
/// Allowed deviation of a ket's squared norm from one.
pub const NORM_TOL: f64 = 1e-12;
/// Eigendecomposition residual bound, relative to `max|h|`.
pub const EIGEN_RESIDUAL_REL: f64 = 1e-9;

const BYTES_PER_AMPLITUDE: u64 = 16;
const DEFAULT_MEM_CAP_MB: u64 = 1024;

/// Memory budget for dense objects.
///
/// Read from `HETPHASE_MEM_CAP_MB` (mebibytes); defaults to 1024. A dense
/// operator of dimension `d` needs `16 d^2` bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryCap {
    pub max_bytes: u64,
}

impl MemoryCap {
    pub fn from_env() -> Self {
        let mb = std::env::var("HETPHASE_MEM_CAP_MB")
            .ok()
            .and_then(|s| s.trim().parse::<u64>().ok())
            .unwrap_or(DEFAULT_MEM_CAP_MB);
        Self::from_mebibytes(mb)
    }

    pub fn from_mebibytes(mb: u64) -> Self {
        Self {
            max_bytes: mb.saturating_mul(1 << 20),
        }
    }

    pub fn allows_ket(&self, dim: usize) -> bool {
        (dim as u64).saturating_mul(BYTES_PER_AMPLITUDE) <= self.max_bytes
    }

    pub fn allows_dense(&self, dim: usize) -> bool {
        let d = dim as u64;
        d.saturating_mul(d).saturating_mul(BYTES_PER_AMPLITUDE) <= self.max_bytes
    }

    pub fn check_dense(&self, dim: usize) -> Result<()> {
        if self.allows_dense(dim) {
            Ok(())
        } else {
            Err(Error::DimensionCap {
                dim,
                cap_bytes: self.max_bytes,
            })
        }
    }
}

impl Default for MemoryCap {
    fn default() -> Self {
        Self::from_env()
    }
}

/// Uniform per-mode photon-number cutoff on `n_modes` modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Truncation {
    n_max: usize,
    n_modes: usize,
    dim: usize,
}

impl Truncation {
    pub fn new(n_max: usize, n_modes: usize) -> Result<Self> {
        Self::with_cap(n_max, n_modes, &MemoryCap::from_env())
    }

    pub fn with_cap(n_max: usize, n_modes: usize, cap: &MemoryCap) -> Result<Self> {
        if n_modes == 0 {
            return Err(invalid("n_modes", 0.0, "at least one mode is required"));
        }
        let per_mode = n_max.checked_add(1).ok_or(Error::DimensionCap {
            dim: usize::MAX,
            cap_bytes: cap.max_bytes,
        })?;
        let mut dim: usize = 1;
        for _ in 0..n_modes {
            dim = dim.checked_mul(per_mode).ok_or(Error::DimensionCap {
                dim: usize::MAX,
                cap_bytes: cap.max_bytes,
            })?;
        }
        if !cap.allows_ket(dim) {
            return Err(Error::DimensionCap {
                dim,
                cap_bytes: cap.max_bytes,
            });
        }
        Ok(Self {
            n_max,
            n_modes,
            dim,
        })
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Dimension of one mode, `n_max + 1`.
    pub fn mode_dim(&self) -> usize {
        self.n_max + 1
    }

    /// The single-mode truncation with the same cutoff.
    pub fn single_mode(&self) -> Truncation {
        Truncation {
            n_max: self.n_max,
            n_modes: 1,
            dim: self.n_max + 1,
        }
    }

    /// Stride of `mode` in the lexicographic index.
    pub fn stride(&self, mode: usize) -> usize {
        self.mode_dim().pow((self.n_modes - 1 - mode) as u32)
    }

    pub fn index(&self, occupations: &[usize]) -> Result<usize> {
        if occupations.len() != self.n_modes {
            return Err(Error::DimensionMismatch {
                expected: self.n_modes,
                found: occupations.len(),
            });
        }
        let mut idx = 0;
        for &n in occupations {
            if n > self.n_max {
                return Err(invalid("occupation", n as f64, "exceeds n_max"));
            }
            idx = idx * self.mode_dim() + n;
        }
        Ok(idx)
    }

    /// Occupation of `mode` in basis state `index`.
    pub fn occupation(&self, index: usize, mode: usize) -> usize {
        (index / self.stride(mode)) % self.mode_dim()
    }

    pub fn occupations(&self, index: usize) -> Vec<usize> {
        (0..self.n_modes)
            .map(|m| self.occupation(index, m))
            .collect()
    }

    pub fn check_mode(&self, mode: usize) -> Result<()> {
        if mode < self.n_modes {
            Ok(())
        } else {
            Err(Error::ModeIndex {
                index: mode,
                n_modes: self.n_modes,
            })
        }
    }

    /// Basis indices whose occupations are all `<= n` (the low-photon block).
    pub fn block_indices(&self, n: usize) -> Vec<usize> {
        (0..self.dim)
            .filter(|&i| (0..self.n_modes).all(|m| self.occupation(i, m) <= n))
            .collect()
    }
}

pub(crate) fn max_abs(m: &CMat) -> f64 {
    let mut best = 0.0f64;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            best = best.max(m[(i, j)].norm());
        }
    }
    best
}

pub(crate) fn max_abs_diff(a: &CMat, b: &CMat) -> f64 {
    let mut best = 0.0f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            best = best.max((a[(i, j)] - b[(i, j)]).norm());
        }
    }
    best
}

pub(crate) fn hermitian_residual(m: &CMat) -> f64 {
    let n = m.nrows();
    let mut best = 0.0f64;
    for j in 0..n {
        for i in 0..=j {
            best = best.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    best
}

pub(crate) fn adjoint(m: &CMat) -> CMat {
    m.adjoint().to_owned()
}

pub(crate) fn trace(m: &CMat) -> c64 {
    (0..m.nrows()).map(|i| m[(i, i)]).sum()
}

/// `Tr[a b]` without forming the product.
pub(crate) fn trace_of_product(a: &CMat, b: &CMat) -> c64 {
    let n = a.nrows();
    let mut acc = c64::new(0.0, 0.0);
    for j in 0..n {
        for i in 0..n {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

/// Dense complex operator on a truncated Fock space.
#[derive(Debug, Clone)]
pub struct DenseOperator {
    matrix: CMat,
    truncation: Truncation,
    hermitian: bool,
    unitary: bool,
}

impl DenseOperator {
    pub fn new(matrix: CMat, truncation: Truncation) -> Result<Self> {
        if matrix.nrows() != truncation.dim() || matrix.ncols() != truncation.dim() {
            return Err(Error::DimensionMismatch {
                expected: truncation.dim(),
                found: matrix.nrows().max(matrix.ncols()),
            });
        }
        Ok(Self {
            matrix,
            truncation,
            hermitian: false,
            unitary: false,
        })
    }

    pub fn zeros(truncation: Truncation) -> Result<Self> {
        MemoryCap::from_env().check_dense(truncation.dim())?;
        let d = truncation.dim();
        Self::new(Mat::zeros(d, d), truncation)
    }

    pub fn identity(truncation: Truncation) -> Result<Self> {
        MemoryCap::from_env().check_dense(truncation.dim())?;
        let d = truncation.dim();
        let mut op = Self::new(Mat::identity(d, d), truncation)?;
        op.hermitian = true;
        op.unitary = true;
        Ok(op)
    }

    pub fn matrix(&self) -> &CMat {
        &self.matrix
    }

    pub fn into_matrix(self) -> CMat {
        self.matrix
    }

    pub fn truncation(&self) -> &Truncation {
        &self.truncation
    }

    pub fn dim(&self) -> usize {
        self.truncation.dim()
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermitian
    }

    pub fn is_unitary(&self) -> bool {
        self.unitary
    }

    pub fn hermitian_residual(&self) -> f64 {
        hermitian_residual(&self.matrix)
    }

    pub fn unitary_residual(&self) -> f64 {
        let prod = self.matrix.adjoint() * &self.matrix;
        max_abs_diff(&prod, &Mat::identity(self.dim(), self.dim()))
    }

    /// Verifies Hermiticity and sets the flag; symmetrizes away round-off.
    pub fn into_hermitian(mut self) -> Result<Self> {
        let residual = self.hermitian_residual();
        if residual > HERMITIAN_TOL {
            return Err(Error::NotHermitian { residual });
        }
        let d = self.dim();
        for j in 0..d {
            for i in 0..j {
                let avg = (self.matrix[(i, j)] + self.matrix[(j, i)].conj()) * 0.5;
                self.matrix[(i, j)] = avg;
                self.matrix[(j, i)] = avg.conj();
            }
            let re = self.matrix[(j, j)].re;
            self.matrix[(j, j)] = c64::new(re, 0.0);
        }
        self.hermitian = true;
        Ok(self)
    }

    pub fn into_unitary(mut self) -> Result<Self> {
        let residual = self.unitary_residual();
        if residual > UNITARY_TOL {
            return Err(Error::NotUnitary { residual });
        }
        self.unitary = true;
        Ok(self)
    }

    fn check_same(&self, other: &DenseOperator) -> Result<()> {
        if self.truncation != other.truncation {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        Ok(())
    }

    pub fn adjoint(&self) -> DenseOperator {
        DenseOperator {
            matrix: adjoint(&self.matrix),
            truncation: self.truncation,
            hermitian: self.hermitian,
            unitary: self.unitary,
        }
    }

    pub fn mul(&self, rhs: &DenseOperator) -> Result<DenseOperator> {
        self.check_same(rhs)?;
        Ok(DenseOperator {
            matrix: &self.matrix * &rhs.matrix,
            truncation: self.truncation,
            hermitian: false,
            unitary: self.unitary && rhs.unitary,
        })
    }

    pub fn add(&self, rhs: &DenseOperator) -> Result<DenseOperator> {
        self.check_same(rhs)?;
        Ok(DenseOperator {
            matrix: &self.matrix + &rhs.matrix,
            truncation: self.truncation,
            hermitian: self.hermitian && rhs.hermitian,
            unitary: false,
        })
    }

    pub fn sub(&self, rhs: &DenseOperator) -> Result<DenseOperator> {
        self.check_same(rhs)?;
        Ok(DenseOperator {
            matrix: &self.matrix - &rhs.matrix,
            truncation: self.truncation,
            hermitian: self.hermitian && rhs.hermitian,
            unitary: false,
        })
    }

    pub fn scale(&self, s: c64) -> DenseOperator {
        let d = self.dim();
        let matrix = Mat::from_fn(d, d, |i, j| self.matrix[(i, j)] * s);
        DenseOperator {
            matrix,
            truncation: self.truncation,
            hermitian: self.hermitian && s.im == 0.0,
            unitary: self.unitary && (s.norm() - 1.0).abs() < 1e-15,
        }
    }

    /// `[self, rhs]`
    pub fn commutator(&self, rhs: &DenseOperator) -> Result<DenseOperator> {
        self.mul(rhs)?.sub(&rhs.mul(self)?)
    }

    pub fn max_abs(&self) -> f64 {
        max_abs(&self.matrix)
    }

    pub fn max_abs_diff(&self, other: &DenseOperator) -> Result<f64> {
        self.check_same(other)?;
        Ok(max_abs_diff(&self.matrix, &other.matrix))
    }

    /// Largest entry of `|self - other|` restricted to rows and columns in `indices`.
    pub fn block_max_abs_diff(&self, other: &DenseOperator, indices: &[usize]) -> Result<f64> {
        self.check_same(other)?;
        let mut best = 0.0f64;
        for &j in indices {
            for &i in indices {
                best = best.max((self.matrix[(i, j)] - other.matrix[(i, j)]).norm());
            }
        }
        Ok(best)
    }

    pub fn apply(&self, ket: &KetState) -> Result<Vec<c64>> {
        if ket.truncation != self.truncation {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: ket.dim(),
            });
        }
        Ok(matvec(&self.matrix, &ket.amplitudes))
    }

    /// `<psi| self |psi>`
    pub fn expectation(&self, ket: &KetState) -> Result<c64> {
        let v = self.apply(ket)?;
        Ok(inner(&ket.amplitudes, &v))
    }

    /// Row-major `(re, im)` pairs, for debugging dumps.
    pub fn to_row_major_pairs(&self) -> Vec<(f64, f64)> {
        let d = self.dim();
        let mut out = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                let v = self.matrix[(i, j)];
                out.push((v.re, v.im));
            }
        }
        out
    }
}

pub(crate) fn matvec(m: &CMat, v: &[c64]) -> Vec<c64> {
    let n = m.nrows();
    let mut out = vec![c64::new(0.0, 0.0); n];
    for (j, &vj) in v.iter().enumerate() {
        if vj == c64::new(0.0, 0.0) {
            continue;
        }
        let col = m.col(j);
        for (i, o) in out.iter_mut().enumerate() {
            *o += col[i] * vj;
        }
    }
    out
}

/// `<a|b>`
pub(crate) fn inner(a: &[c64], b: &[c64]) -> c64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub(crate) fn norm_sqr(v: &[c64]) -> f64 {
    v.iter().map(|x| x.norm_sqr()).sum()
}

/// Normalized complex amplitude vector on a truncated Fock space.
#[derive(Debug, Clone, PartialEq)]
pub struct KetState {
    amplitudes: Vec<c64>,
    truncation: Truncation,
    discarded_mass: f64,
}

impl KetState {
    /// Wraps amplitudes that must already be normalized to `NORM_TOL`.
    pub fn new(amplitudes: Vec<c64>, truncation: Truncation) -> Result<Self> {
        if amplitudes.len() != truncation.dim() {
            return Err(Error::DimensionMismatch {
                expected: truncation.dim(),
                found: amplitudes.len(),
            });
        }
        let n = norm_sqr(&amplitudes);
        if (n - 1.0).abs() > NORM_TOL {
            return Err(Error::InvalidState(format!(
                "squared norm {n} is not within {NORM_TOL:e} of one"
            )));
        }
        Ok(Self {
            amplitudes,
            truncation,
            discarded_mass: 0.0,
        })
    }

    /// Renormalizes `amplitudes`; fails on a zero vector.
    pub fn normalized(mut amplitudes: Vec<c64>, truncation: Truncation) -> Result<Self> {
        if amplitudes.len() != truncation.dim() {
            return Err(Error::DimensionMismatch {
                expected: truncation.dim(),
                found: amplitudes.len(),
            });
        }
        let n = norm_sqr(&amplitudes);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::InvalidState("cannot normalize a zero vector".into()));
        }
        let s = 1.0 / n.sqrt();
        amplitudes.iter_mut().for_each(|a| *a *= s);
        Ok(Self {
            amplitudes,
            truncation,
            discarded_mass: 0.0,
        })
    }

    pub fn basis(truncation: Truncation, occupations: &[usize]) -> Result<Self> {
        let idx = truncation.index(occupations)?;
        let mut amplitudes = vec![c64::new(0.0, 0.0); truncation.dim()];
        amplitudes[idx] = c64::new(1.0, 0.0);
        Self::new(amplitudes, truncation)
    }

    pub fn vacuum(truncation: Truncation) -> Self {
        let mut amplitudes = vec![c64::new(0.0, 0.0); truncation.dim()];
        amplitudes[0] = c64::new(1.0, 0.0);
        Self {
            amplitudes,
            truncation,
            discarded_mass: 0.0,
        }
    }

    pub(crate) fn with_discarded_mass(mut self, mass: f64) -> Self {
        self.discarded_mass = mass;
        self
    }

    pub fn amplitudes(&self) -> &[c64] {
        &self.amplitudes
    }

    pub fn truncation(&self) -> &Truncation {
        &self.truncation
    }

    pub fn dim(&self) -> usize {
        self.truncation.dim()
    }

    /// Probability removed by the truncation before renormalization.
    pub fn discarded_mass(&self) -> f64 {
        self.discarded_mass
    }

    pub fn norm_sqr(&self) -> f64 {
        norm_sqr(&self.amplitudes)
    }

    pub fn amplitude(&self, occupations: &[usize]) -> Result<c64> {
        Ok(self.amplitudes[self.truncation.index(occupations)?])
    }

    /// Probability on basis states with any occupation equal to `n_max`.
    pub fn boundary_mass(&self) -> f64 {
        let t = &self.truncation;
        self.amplitudes
            .iter()
            .enumerate()
            .filter(|(i, _)| (0..t.n_modes()).any(|m| t.occupation(*i, m) == t.n_max()))
            .map(|(_, a)| a.norm_sqr())
            .sum()
    }

    /// Same amplitudes on a larger cutoff.
    pub fn embed_into(&self, target: Truncation) -> Result<KetState> {
        if target.n_modes() != self.truncation.n_modes() || target.n_max() < self.truncation.n_max()
        {
            return Err(Error::DimensionMismatch {
                expected: self.truncation.dim(),
                found: target.dim(),
            });
        }
        let mut amps = vec![c64::new(0.0, 0.0); target.dim()];
        for (i, a) in self.amplitudes.iter().enumerate() {
            amps[target.index(&self.truncation.occupations(i))?] = *a;
        }
        Ok(KetState {
            amplitudes: amps,
            truncation: target,
            discarded_mass: self.discarded_mass,
        })
    }

    /// Photon-number distribution of one mode.
    pub fn mode_distribution(&self, mode: usize) -> Result<Vec<f64>> {
        self.truncation.check_mode(mode)?;
        let mut p = vec![0.0; self.truncation.mode_dim()];
        for (i, a) in self.amplitudes.iter().enumerate() {
            p[self.truncation.occupation(i, mode)] += a.norm_sqr();
        }
        Ok(p)
    }

    /// Applies a single-mode matrix to `mode` without forming the embedded operator.
    pub fn apply_mode_matrix(&self, op: &CMat, mode: usize) -> Result<Vec<c64>> {
        let t = &self.truncation;
        t.check_mode(mode)?;
        let m = t.mode_dim();
        if op.nrows() != m || op.ncols() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                found: op.nrows(),
            });
        }
        let stride = t.stride(mode);
        let outer = t.dim() / (stride * m);
        let mut out = vec![c64::new(0.0, 0.0); t.dim()];
        let mut column = vec![c64::new(0.0, 0.0); m];
        for o in 0..outer {
            for s in 0..stride {
                let base = o * stride * m + s;
                for (q, c) in column.iter_mut().enumerate() {
                    *c = self.amplitudes[base + q * stride];
                }
                for p in 0..m {
                    let mut acc = c64::new(0.0, 0.0);
                    for (q, c) in column.iter().enumerate() {
                        acc += op[(p, q)] * c;
                    }
                    out[base + p * stride] = acc;
                }
            }
        }
        Ok(out)
    }

    pub fn to_density(&self) -> DensityOperator {
        let d = self.dim();
        let a = &self.amplitudes;
        DensityOperator {
            matrix: Mat::from_fn(d, d, |i, j| a[i] * a[j].conj()),
            truncation: self.truncation,
        }
    }

    /// `|self> (x) |other>`
    pub fn tensor(&self, other: &KetState) -> Result<KetState> {
        if self.truncation.n_max() != other.truncation.n_max() {
            return Err(Error::DimensionMismatch {
                expected: self.truncation.n_max(),
                found: other.truncation.n_max(),
            });
        }
        let t = Truncation::new(
            self.truncation.n_max(),
            self.truncation.n_modes() + other.truncation.n_modes(),
        )?;
        let mut amplitudes = Vec::with_capacity(t.dim());
        for a in &self.amplitudes {
            for b in &other.amplitudes {
                amplitudes.push(a * b);
            }
        }
        Ok(KetState {
            amplitudes,
            truncation: t,
            discarded_mass: self.discarded_mass + other.discarded_mass,
        })
    }
}

/// Hermitian, unit-trace, positive semidefinite matrix on a truncated space.
#[derive(Debug, Clone)]
pub struct DensityOperator {
    matrix: CMat,
    truncation: Truncation,
}

/// Validation tolerances for density operators.
pub const DENSITY_TRACE_TOL: f64 = 1e-8;
pub const DENSITY_MIN_EIGEN: f64 = -1e-8;

impl DensityOperator {
    /// Validates Hermiticity, trace and positivity.
    pub fn new(matrix: CMat, truncation: Truncation) -> Result<Self> {
        let rho = Self::from_matrix_unchecked(matrix, truncation)?;
        rho.validate()?;
        Ok(rho)
    }

    pub(crate) fn from_matrix_unchecked(matrix: CMat, truncation: Truncation) -> Result<Self> {
        if matrix.nrows() != truncation.dim() || matrix.ncols() != truncation.dim() {
            return Err(Error::DimensionMismatch {
                expected: truncation.dim(),
                found: matrix.nrows(),
            });
        }
        Ok(Self { matrix, truncation })
    }

    pub fn validate(&self) -> Result<()> {
        let h = hermitian_residual(&self.matrix);
        if h > HERMITIAN_TOL {
            return Err(Error::NotHermitian { residual: h });
        }
        let tr = self.trace();
        if (tr - 1.0).abs() > DENSITY_TRACE_TOL {
            return Err(Error::InvalidState(format!("trace {tr} differs from one")));
        }
        let min = self.min_eigenvalue()?;
        if min < DENSITY_MIN_EIGEN {
            return Err(Error::InvalidState(format!(
                "minimum eigenvalue {min:e} is negative"
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> &CMat {
        &self.matrix
    }

    pub fn truncation(&self) -> &Truncation {
        &self.truncation
    }

    pub fn dim(&self) -> usize {
        self.truncation.dim()
    }

    pub fn trace(&self) -> f64 {
        trace(&self.matrix).re
    }

    /// Diagonal weight on basis states with any occupation equal to `n_max`.
    pub fn boundary_mass(&self) -> f64 {
        let t = &self.truncation;
        (0..self.dim())
            .filter(|&i| (0..t.n_modes()).any(|m| t.occupation(i, m) == t.n_max()))
            .map(|i| self.matrix[(i, i)].re)
            .sum()
    }

    /// `Tr rho^2`
    pub fn purity(&self) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.dim() {
            for i in 0..self.dim() {
                acc += self.matrix[(i, j)].norm_sqr();
            }
        }
        acc
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        let vals = self
            .matrix
            .self_adjoint_eigenvalues(Side::Lower)
            .map_err(|e| Error::Eigensolver(format!("{e:?}")))?;
        Ok(vals.first().copied().unwrap_or(0.0))
    }

    /// `Tr[op rho]`
    pub fn expectation(&self, op: &DenseOperator) -> Result<c64> {
        if op.truncation != self.truncation {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: op.dim(),
            });
        }
        Ok(trace_of_product(&op.matrix, &self.matrix))
    }

    /// Mixture weights and normalized eigenvectors with weight above `cutoff`.
    pub fn pure_components(&self, cutoff: f64) -> Result<Vec<(f64, Vec<c64>)>> {
        let eig = self
            .matrix
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| Error::Eigensolver(format!("{e:?}")))?;
        let s = eig.S().column_vector();
        let u = eig.U();
        let mut out = Vec::new();
        for k in 0..self.dim() {
            let p = s[k].re;
            if p > cutoff {
                out.push((p, (0..self.dim()).map(|i| u[(i, k)]).collect()));
            }
        }
        out.sort_by(|a, b| b.0.total_cmp(&a.0));
        Ok(out)
    }

    /// Zero-pads into a larger cutoff with the same number of modes.
    pub fn embed_into(&self, target: Truncation) -> Result<DensityOperator> {
        if target.n_modes() != self.truncation.n_modes() || target.n_max() < self.truncation.n_max()
        {
            return Err(Error::DimensionMismatch {
                expected: self.truncation.dim(),
                found: target.dim(),
            });
        }
        let map: Vec<usize> = (0..self.dim())
            .map(|i| target.index(&self.truncation.occupations(i)))
            .collect::<Result<_>>()?;
        let mut m = Mat::zeros(target.dim(), target.dim());
        for j in 0..self.dim() {
            for i in 0..self.dim() {
                m[(map[i], map[j])] = self.matrix[(i, j)];
            }
        }
        Ok(DensityOperator {
            matrix: m,
            truncation: target,
        })
    }

    /// `self (x) other`
    pub fn tensor(&self, other: &DensityOperator) -> Result<DensityOperator> {
        if self.truncation.n_max() != other.truncation.n_max() {
            return Err(Error::DimensionMismatch {
                expected: self.truncation.n_max(),
                found: other.truncation.n_max(),
            });
        }
        let t = Truncation::new(
            self.truncation.n_max(),
            self.truncation.n_modes() + other.truncation.n_modes(),
        )?;
        MemoryCap::from_env().check_dense(t.dim())?;
        let mut m = Mat::zeros(t.dim(), t.dim());
        faer::linalg::kron::kron(m.as_mut(), self.matrix.as_ref(), other.matrix.as_ref());
        Ok(DensityOperator {
            matrix: m,
            truncation: t,
        })
    }
}

/// Single-mode annihilation operator: `sqrt(n)` at row `n-1`, column `n`.
pub fn annihilator(n_max: usize) -> Result<DenseOperator> {
    let t = Truncation::new(n_max, 1)?;
    MemoryCap::from_env().check_dense(t.dim())?;
    let d = t.dim();
    let m = Mat::from_fn(d, d, |i, j| {
        if j == i + 1 {
            c64::new((j as f64).sqrt(), 0.0)
        } else {
            c64::new(0.0, 0.0)
        }
    });
    DenseOperator::new(m, t)
}

/// `I (x) ... (x) op (x) ... (x) I` with `op` acting on `mode_index`.
pub fn embed(
    op: &DenseOperator,
    mode_index: usize,
    truncation: &Truncation,
) -> Result<DenseOperator> {
    truncation.check_mode(mode_index)?;
    let m = truncation.mode_dim();
    if op.truncation.n_modes() != 1 || op.dim() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            found: op.dim(),
        });
    }
    MemoryCap::from_env().check_dense(truncation.dim())?;
    let d = truncation.dim();
    let stride = truncation.stride(mode_index);
    let outer = d / (stride * m);
    let mut out = Mat::zeros(d, d);
    for q in 0..m {
        for p in 0..m {
            let v = op.matrix[(p, q)];
            if v == c64::new(0.0, 0.0) {
                continue;
            }
            for o in 0..outer {
                for s in 0..stride {
                    let base = o * stride * m + s;
                    out[(base + p * stride, base + q * stride)] = v;
                }
            }
        }
    }
    Ok(DenseOperator {
        matrix: out,
        truncation: *truncation,
        hermitian: op.hermitian,
        unitary: op.unitary,
    })
}

/// Eigendecomposition `h = V diag(values) V^dag` of a Hermitian matrix.
#[derive(Debug, Clone)]
pub struct HermitianEigen {
    pub values: Vec<f64>,
    pub vectors: CMat,
}

impl HermitianEigen {
    /// Full decomposition with the residual check `max|hV - V diag| <= 1e-9 max|h|`.
    pub fn new(h: &CMat) -> Result<Self> {
        let eig = h
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| Error::Eigensolver(format!("{e:?}")))?;
        let s = eig.S().column_vector();
        let values: Vec<f64> = (0..h.nrows()).map(|k| s[k].re).collect();
        let vectors = eig.U().to_owned();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Eigensolver("non-finite eigenvalue".into()));
        }
        let hv = h * &vectors;
        let mut residual = 0.0f64;
        for k in 0..h.ncols() {
            for i in 0..h.nrows() {
                residual = residual.max((hv[(i, k)] - vectors[(i, k)] * values[k]).norm());
            }
        }
        let bound = EIGEN_RESIDUAL_REL * max_abs(h).max(f64::MIN_POSITIVE);
        if residual > bound {
            return Err(Error::EigenResidual { residual, bound });
        }
        Ok(Self { values, vectors })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `V diag(f(values)) V^dag`
    pub fn apply(&self, f: impl Fn(f64) -> c64) -> CMat {
        let fv: Vec<c64> = self.values.iter().map(|&x| f(x)).collect();
        self.apply_values(&fv)
    }

    pub(crate) fn apply_values(&self, fv: &[c64]) -> CMat {
        let d = self.dim();
        let v = &self.vectors;
        let scaled = Mat::from_fn(d, d, |i, k| v[(i, k)] * fv[k]);
        &scaled * v.adjoint()
    }

    /// `V^dag x`
    pub fn coefficients(&self, x: &[c64]) -> Vec<c64> {
        let d = self.dim();
        (0..d)
            .map(|k| {
                let col = self.vectors.col(k);
                (0..d).map(|i| col[i].conj() * x[i]).sum()
            })
            .collect()
    }

    /// `V diag(f) V^dag x`
    pub fn apply_to_vector(&self, f: impl Fn(f64) -> c64, x: &[c64]) -> Vec<c64> {
        let c = self.coefficients(x);
        let d = self.dim();
        let mut out = vec![c64::new(0.0, 0.0); d];
        for (k, (&ck, &v)) in c.iter().zip(&self.values).enumerate() {
            let ck = ck * f(v);
            if ck == c64::new(0.0, 0.0) {
                continue;
            }
            let col = self.vectors.col(k);
            for (i, o) in out.iter_mut().enumerate() {
                *o += col[i] * ck;
            }
        }
        out
    }
}

/// Eigendecomposition of a real symmetric matrix, with the same residual check.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Mat<f64>,
}

impl SymmetricEigen {
    pub fn new(h: &Mat<f64>) -> Result<Self> {
        let eig = h
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| Error::Eigensolver(format!("{e:?}")))?;
        let s = eig.S().column_vector();
        let values: Vec<f64> = (0..h.nrows()).map(|k| s[k]).collect();
        let vectors = eig.U().to_owned();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Eigensolver("non-finite eigenvalue".into()));
        }
        let hv = h * &vectors;
        let mut residual = 0.0f64;
        let mut scale = 0.0f64;
        for k in 0..h.ncols() {
            for i in 0..h.nrows() {
                residual = residual.max((hv[(i, k)] - vectors[(i, k)] * values[k]).abs());
                scale = scale.max(h[(i, k)].abs());
            }
        }
        let bound = EIGEN_RESIDUAL_REL * scale.max(f64::MIN_POSITIVE);
        if residual > bound {
            return Err(Error::EigenResidual { residual, bound });
        }
        Ok(Self { values, vectors })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `V diag(f(values)) V^T`
    pub fn apply(&self, f: impl Fn(f64) -> f64) -> Mat<f64> {
        let d = self.dim();
        let fv: Vec<f64> = self.values.iter().map(|&x| f(x)).collect();
        let v = &self.vectors;
        let scaled = Mat::from_fn(d, d, |i, k| v[(i, k)] * fv[k]);
        &scaled * v.transpose()
    }
}

/// Spectral calculus `V f(diag) V^dag` of a Hermitian operator.
pub fn hermitian_function(h: &DenseOperator, f: impl Fn(f64) -> c64) -> Result<DenseOperator> {
    let residual = h.hermitian_residual();
    if residual > HERMITIAN_TOL {
        return Err(Error::NotHermitian { residual });
    }
    let eig = HermitianEigen::new(&h.matrix)?;
    let fv: Vec<c64> = eig.values.iter().map(|&x| f(x)).collect();
    let real = fv.iter().all(|v| v.im == 0.0);
    let out = DenseOperator::new(eig.apply_values(&fv), h.truncation)?;
    if real {
        out.into_hermitian()
    } else {
        Ok(out)
    }
}

/// `exp(-i h t)`, verified unitary.
pub fn unitary_from_hamiltonian(h: &DenseOperator, t: f64) -> Result<DenseOperator> {
    hermitian_function(h, |x| c64::new(0.0, -x * t).exp())?.into_unitary()
}

/// `exp(alpha a^dag - conj(alpha) a)` on `mode_index`.
///
/// Exactly unitary on the truncated space but a faithful displacement only
/// well below the cutoff; `|alpha|^2` should stay under about `n_max / 4`.
pub fn displacement(
    alpha: c64,
    mode_index: usize,
    truncation: &Truncation,
) -> Result<DenseOperator> {
    truncation.check_mode(mode_index)?;
    let single = single_mode_displacement(alpha, truncation.n_max())?;
    embed(&single, mode_index, truncation)
}

/// `exp(alpha a^dag - conj(alpha) a)` on a single mode.
pub fn single_mode_displacement(alpha: c64, n_max: usize) -> Result<DenseOperator> {
    let a = annihilator(n_max)?;
    let d = a.dim();
    // exp(G) with G anti-Hermitian equals exp(-i h) for h = i G.
    let i = c64::new(0.0, 1.0);
    let h = Mat::from_fn(d, d, |r, c| {
        let g = alpha * a.matrix[(c, r)].conj() - alpha.conj() * a.matrix[(r, c)];
        i * g
    });
    let h = DenseOperator::new(h, a.truncation)?.into_hermitian()?;
    unitary_from_hamiltonian(&h, 1.0)
}
