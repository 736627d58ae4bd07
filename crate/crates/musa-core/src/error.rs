//! Error type shared by all modules.
//!
//! Variants map onto the four reporting categories used by the CLI:
//! `config`, `geometry`, `numeric` and `io`. `Sampling` failures are
//! geometry problems in practice (a sampler starved by the domain), and
//! `Parse` failures are file problems, so they fold into `geometry` and
//! `io` respectively.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration.
    #[error("config: {0}")]
    Config(String),

    /// Geometry query or construction failure.
    #[error("geometry: {0}")]
    Geometry(String),

    /// A sampler exhausted its retry budget.
    #[error("sampling: {0}")]
    Sampling(String),

    /// Non-finite value or invalid numeric domain.
    #[error("numeric: {0}")]
    Numeric(String),

    /// Malformed file contents (checkpoints, CSV imports).
    #[error("parse: {0}")]
    Parse(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Reporting category for CLI exit diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Geometry(_) | Error::Sampling(_) => "geometry",
            Error::Numeric(_) => "numeric",
            Error::Parse(_) | Error::Io(_) => "io",
        }
    }
}
