//! Error taxonomy shared by the library and the command-line frontend.
//!
//! Errors are split by who can fix them: `Config` means the caller supplied
//! an invalid specification (bad key, malformed value, violated
//! precondition on parameters), `Domain` means a query was outside the
//! valid range of an otherwise well-configured object, `Contract` means an
//! internal invariant that callers rely on was violated, `Internal` covers
//! numerical failures (e.g. a singular Gram matrix), and `Io` wraps
//! filesystem problems with the offending path attached.

use std::path::PathBuf;

/// All failure modes surfaced by the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration: unknown key, malformed value, or parameters
    /// that violate a documented precondition. Maps to exit code 2.
    #[error("configuration error: {0}")]
    Config(String),

    /// A query outside the valid domain of a well-formed object
    /// (e.g. a round index past the horizon).
    #[error("domain error: {0}")]
    Domain(String),

    /// An internal invariant failed; indicates a bug or a numerically
    /// degenerate state that should never arise from valid inputs.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Numerical failure such as a non-positive-definite Gram matrix.
    #[error("internal error: {0}")]
    Internal(String),

    /// Filesystem failure, with the path that triggered it.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Exit code for the CLI: configuration errors are 2, everything else 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }

    /// Convenience constructor for configuration errors.
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Convenience constructor for domain errors.
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// Convenience constructor for i/o errors.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
