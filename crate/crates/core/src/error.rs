use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("stratum {stratum}: {reason}")]
    Stratum { stratum: usize, reason: String },

    #[error("invalid allocation: {0}")]
    Allocation(String),

    #[error("zero anticipated total in constrained cells: {}", .0.join(", "))]
    ZeroTotals(Vec<String>),

    #[error("solver did not converge after {iterations} iterations (residual {residual:.3e}, multiplier change {multiplier_change:.3e})")]
    NoConvergence { iterations: usize, residual: f64, multiplier_change: f64 },

    #[error("model fit failed: {0}")]
    Fit(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("I/O error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }

    pub fn stratum(stratum: usize, reason: impl Into<String>) -> Self {
        Error::Stratum { stratum, reason: reason.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
