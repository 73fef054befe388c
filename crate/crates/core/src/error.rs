use thiserror::Error;

/// Errors raised by the simulator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension {dim} exceeds the configured cap ({cap_bytes} bytes; set HETPHASE_MEM_CAP_MB to raise it)")]
    DimensionCap { dim: usize, cap_bytes: u64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("mode index {index} out of range for {n_modes} modes")]
    ModeIndex { index: usize, n_modes: usize },

    #[error("operator is not Hermitian (max |M - M^dag| = {residual:e})")]
    NotHermitian { residual: f64 },

    #[error("operator is not unitary (max |U^dag U - I| = {residual:e})")]
    NotUnitary { residual: f64 },

    #[error("eigensolver failed: {0}")]
    Eigensolver(String),

    #[error("eigendecomposition residual {residual:e} exceeds bound {bound:e}")]
    EigenResidual { residual: f64, bound: f64 },

    #[error("invalid parameter `{name}` = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("outcome density {density:e} is below the conditioning floor {floor:e}")]
    DensityBelowFloor { density: f64, floor: f64 },

    #[error("quadrature grid covers {coverage} of the weight, below the required {required}")]
    QuadratureCoverage { coverage: f64, required: f64 },

    #[error("truncation too small: {0}")]
    TruncationTooSmall(String),

    #[error("invalid frequency plan; failing checks: {}", .0.join(", "))]
    InvalidPlan(Vec<String>),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, value: f64, reason: &'static str) -> Error {
    Error::InvalidParameter {
        name,
        value,
        reason,
    }
}
