//! Crate-wide error type and result alias.

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
///
/// Each variant maps to a stable machine-parseable category string (see
/// [`Error::category`]) that the CLI prints as `error[<category>]: <message>`.
#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shape or dimension mismatch.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A documented precondition of an operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Waveform or spectrogram level failure (empty input, rate mismatch, ...).
    #[error("signal error: {0}")]
    Signal(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Optimizer failure, carrying the offending parameter path.
    #[error("optimizer error at parameter `{param}`: {message}")]
    Optimizer { param: String, message: String },

    /// Training-loop failure, carrying the loss component that misbehaved.
    #[error("training error in component `{component}`: {message}")]
    Training { component: String, message: String },

    /// ODE solver failure, carrying the step index where it occurred.
    #[error("solver error at step {step}: {message}")]
    Solver { step: usize, message: String },

    /// Evaluation harness failure.
    #[error("eval error: {0}")]
    Eval(String),

    /// A required external resource (codec binary, ...) is unavailable.
    #[error("environment error: {0}")]
    Environment(String),

    /// A referenced input file could not be ingested.
    #[error("ingestion error for `{path}`: {message}")]
    Ingestion { path: String, message: String },

    /// Checkpoint or manifest parse failure.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable one-word category used by the CLI error line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Contract(_) => "contract",
            Error::Signal(_) => "signal",
            Error::Config(_) => "config",
            Error::Optimizer { .. } => "optimizer",
            Error::Training { .. } => "training",
            Error::Solver { .. } => "solver",
            Error::Eval(_) => "eval",
            Error::Environment(_) => "environment",
            Error::Ingestion { .. } => "ingestion",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }

    /// Process exit code the CLI maps this error to.
    ///
    /// Configuration and ingestion problems exit with 2 (usage class),
    /// everything else with 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Ingestion { .. } | Error::Contract(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
