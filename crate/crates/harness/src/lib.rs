//! Dataset generation, persistence, experiments and plotting on top of
//! [`mbce_core`].
//!
//! * [`dataset`]: synthetic scenes, receiver sampling and trajectories.
//! * [`bundle`]: the on-disk dataset format (JSON manifest + `f32` blobs).
//! * [`checkpoint`]: PINN parameter files.
//! * [`experiments`]: estimation runs, sweeps and train/val/test splits.
//! * [`training`]: turning bundles into PINN training sets.
//! * [`plot`]: minimal SVG line charts.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;

use thiserror::Error;

use mbce_core::channel::ChannelError;
use mbce_core::estimators::EstimatorError;
use mbce_core::pinn::PinnError;
use mbce_core::propagation::PropagationError;

pub mod bundle;
pub mod checkpoint;
pub mod dataset;
pub mod experiments;
pub mod plot;
pub mod training;

/// Thread-count variable read by sweeps; unset means 1.
pub const THREADS_ENV: &str = "MBCE_THREADS";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("checksum mismatch for blob {0}")]
    ChecksumMismatch(String),
    #[error("unsupported schema version {0}")]
    SchemaVersionUnsupported(u32),
    #[error("blob {blob} holds {got} bytes, manifest dimensions imply {expected}")]
    SizeMismatch { blob: String, expected: u64, got: u64 },
    #[error("no sampled receiver position has any propagation path")]
    SceneDegenerate,
    #[error("{0} must be positive")]
    NonPositiveInput(&'static str),
    #[error("trajectory step {step_s} s is shorter than the coherence time {coherence_s} s")]
    StepBelowCoherence { step_s: f64, coherence_s: f64 },
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
    #[error("checkpoint does not fit the bundle: {0}")]
    CheckpointShapeMismatch(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Propagation(#[from] PropagationError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Pinn(#[from] PinnError),
}

impl HarnessError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    /// CLI exit code: 3 for numerical failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Pinn(PinnError::NonFiniteLoss { .. })
            | HarnessError::Pinn(PinnError::ZeroReference)
            | HarnessError::Estimator(EstimatorError::DictionaryRankDeficient)
            | HarnessError::Estimator(EstimatorError::ZeroReference) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
