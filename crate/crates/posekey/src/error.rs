//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value violated a precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Two poses or feature sets do not share a layout.
    #[error("topology mismatch: {0}")]
    TopologyMismatch(String),

    /// A pose is too degenerate for the requested geometry (e.g. zero-length torso).
    #[error("degenerate pose: {0}")]
    DegeneratePose(String),

    /// Synthetic data generation could not satisfy its separation constraints.
    #[error("generation failed: {0}")]
    Generation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A manifest, checkpoint, or annotation file is missing or inconsistent.
    #[error("load error: {0}")]
    Load(String),

    /// External pose-detector subprocess failure; carries the offending line when known.
    #[error("detector error: {0}")]
    Detector(String),

    /// A loss component became NaN or infinite during training.
    #[error("training diverged at step {step}: component {component} is not finite")]
    Divergence { component: String, step: u64 },

    /// Numerical failure inside a metric (e.g. covariance not PSD).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// Stable one-word category for machine-parsable CLI output.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Argument(_) => "argument",
            Error::TopologyMismatch(_) => "topology",
            Error::DegeneratePose(_) => "degenerate-pose",
            Error::Generation(_) => "generation",
            Error::Io { .. } => "io",
            Error::Load(_) => "load",
            Error::Detector(_) => "detector",
            Error::Divergence { .. } => "divergence",
            Error::Numeric(_) => "numeric",
            Error::Config(_) => "config",
        }
    }

    /// True for errors that indicate misuse of the CLI rather than a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Argument(_) | Error::Config(_))
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
