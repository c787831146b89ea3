//! Error taxonomy shared by every pipeline stage.
//!
//! The CLI maps these onto process exit codes: parameter/config errors -> 1,
//! data/structure/shape errors -> 2, numerical failures -> 3.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied parameter is out of range or unknown.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Input data violates a structural requirement (empty group, missing
    /// channel, mismatched view counts, unsatisfiable dataset layout).
    #[error("invalid structure: {0}")]
    Structure(String),

    /// Array or tensor dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Input is technically well-formed but degenerate (constant image,
    /// zero vector) and refusing is safer than guessing.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A computation produced non-finite values or failed to converge.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A required input artifact is missing or unreadable.
    #[error("missing dependency: {0}")]
    Dependency(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("tensor backend error: {0}")]
    Backend(#[from] candle_core::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Exit code class for the CLI: 1 config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parameter(_) => 1,
            Error::Structure(_)
            | Error::Shape(_)
            | Error::Degenerate(_)
            | Error::Dependency(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Serde(_)
            | Error::Image(_) => 2,
            Error::Numerical(_) | Error::Backend(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
