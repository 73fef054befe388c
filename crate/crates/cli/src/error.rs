use std::path::Path;

use hetphase_core::Error as CoreError;

/// Failures grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("invalid frequency plan: {0}")]
    InvalidPlan(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
            CliError::InvalidPlan(_) => 5,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::InvalidParameter { .. }
            | CoreError::InvalidState(_)
            | CoreError::DimensionCap { .. }
            | CoreError::DimensionMismatch { .. }
            | CoreError::ModeIndex { .. } => CliError::Validation(msg),
            CoreError::InvalidPlan(_) => CliError::InvalidPlan(msg),
            CoreError::NotHermitian { .. }
            | CoreError::NotUnitary { .. }
            | CoreError::Eigensolver(_)
            | CoreError::EigenResidual { .. }
            | CoreError::DensityBelowFloor { .. }
            | CoreError::QuadratureCoverage { .. }
            | CoreError::TruncationTooSmall(_) => CliError::Numerical(msg),
        }
    }
}
