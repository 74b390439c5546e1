use std::path::PathBuf;

use thiserror::Error;

use crate::diffeng::DiffError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),

    #[error("gaussian {index}: degenerate quaternion (norm {norm:e})")]
    DegenerateQuaternion { index: usize, norm: f64 },

    #[error("quaternion is not unit length (norm {norm})")]
    NotUnitQuaternion { norm: f64 },

    #[error("expected {expected} SH coefficients per channel, got {got}")]
    ShCoefficientCount { expected: usize, got: usize },

    #[error("{what}: {left:?} does not match {right:?}")]
    DimensionMismatch {
        what: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("covariance is not positive definite (det {det:e})")]
    NotPositiveDefinite { det: f64 },

    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },

    #[error("{what} = {value} outside [{min}, {max}]")]
    OutOfRange {
        what: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("unknown camera id {0}")]
    UnknownCamera(u32),

    #[error("missing frame for camera {camera} at timestep {t}: {path}")]
    MissingFrame { camera: u32, t: usize, path: PathBuf },

    #[error("non-finite {0}")]
    NonFinite(String),

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bridge {endpoint} failed (status {status:?}): {message}")]
    Bridge {
        endpoint: String,
        status: Option<u16>,
        message: String,
    },

    #[error("guidance failed: {0}")]
    Guidance(String),
}

impl Error {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Errors caused by bad inputs rather than by a failing run.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Self::NonFinite(_) | Self::Bridge { .. } | Self::Guidance(_) | Self::Io { .. }
        )
    }
}
