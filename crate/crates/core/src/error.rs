//! Crate-wide error type.
//!
//! Every failure carries a stable machine-readable code (used by the CLI's
//! `ERROR:<code>:` prefix) and classifies as either a validation error
//! (exit 1) or a numerical failure (exit 2).

use thiserror::Error;

/// Errors produced by any stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in {path} (line {line}): {msg}")]
    Parse {
        path: String,
        line: u64,
        msg: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("location ({lon}, {lat}) is missing on day {day}")]
    MissingCell { lon: f64, lat: f64, day: i64 },

    #[error("duplicate record for day {day} at ({lon}, {lat})")]
    DuplicateRecord { day: i64, lon: f64, lat: f64 },

    #[error("duplicate locations in input at indices {0} and {1}")]
    DuplicateLocations(usize, usize),

    #[error("monitor set needs at least 2 distinct locations, found {0}")]
    TooFewSites(usize),

    #[error("field is degenerate: {0}")]
    DegenerateField(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("index {index} out of range (valid 1..={max})")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("window has {got} cells, need at least {min}")]
    TooFewCells { got: usize, min: usize },

    #[error("no window fit converged; cannot fill estimates")]
    NoConvergedWindows,

    #[error("matrix not positive definite (max jitter {max_jitter:.3e} exhausted)")]
    NotPositiveDefinite { max_jitter: f64 },

    #[error("MCMC chain diverged at iteration {iteration}: {msg}")]
    ChainDiverged { iteration: usize, msg: String },

    #[error("no posterior samples available")]
    NoSamples,

    #[error("stratum mismatch: {0}")]
    StratumMismatch(String),

    #[error("pipeline stage '{stage}' failed: {source}")]
    StageFailed {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("missing flag: {0}")]
    MissingFlag(String),

    #[error("unknown subcommand: {0}")]
    UnknownSubcommand(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable code used in the CLI's `ERROR:<code>:` prefix.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "ParseError",
            Error::EmptyInput(_) => "EmptyInput",
            Error::MissingCell { .. } => "MissingCell",
            Error::DuplicateRecord { .. } => "DuplicateRecord",
            Error::DuplicateLocations(..) => "DuplicateLocations",
            Error::TooFewSites(_) => "TooFewSites",
            Error::DegenerateField(_) => "DegenerateField",
            Error::GeometryMismatch(_) => "GeometryMismatch",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::Domain(_) => "DomainError",
            Error::TooFewCells { .. } => "TooFewCells",
            Error::NoConvergedWindows => "NoConvergedWindows",
            Error::NotPositiveDefinite { .. } => "NotPositiveDefinite",
            Error::ChainDiverged { .. } => "ChainDiverged",
            Error::NoSamples => "NoSamples",
            Error::StratumMismatch(_) => "StratumMismatch",
            Error::StageFailed { .. } => "StageFailed",
            Error::MissingFlag(_) => "MissingFlag",
            Error::UnknownSubcommand(_) => "UnknownSubcommand",
            Error::Io { .. } => "IoError",
        }
    }

    /// Process exit code: 1 for validation errors, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NotPositiveDefinite { .. }
            | Error::ChainDiverged { .. }
            | Error::NoConvergedWindows => 2,
            Error::StageFailed { source, .. } => source.exit_code(),
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
