//! Simulator of repeatable two-mode heterodyne phase measurement on
//! truncated Fock spaces.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiments;
pub mod fock;
pub mod interaction;
pub mod krylov;
pub mod povm;
pub mod twinbeam;

pub use error::{Error, Result};
pub use faer::c64;

pub use experiments::{
    CutoffGrowth, DensityGrid, KetSampler, MeasurementRecord, OutcomeSampler, SamplerSpec,
    SensitivityPoint, TruncationPolicy,
};
pub use fock::{DenseOperator, DensityOperator, KetState, MemoryCap, Truncation};
pub use interaction::{FourModeSystem, FrequencyPlan, IndirectReport, InteractionModel, Term};
pub use krylov::KetHeterodyne;
pub use povm::{delta_sq, DetectorParams, Heterodyne, HeterodyneOutcome, RadialGrid};
pub use twinbeam::{DisplacedTwinBeamParams, TwinBeamParams};

/// Dense complex matrix.
pub type CMat = faer::Mat<c64>;
