use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("unsupported format version {found} (supported: {supported})")]
    Version { found: String, supported: String },

    #[error("rank error: {0}")]
    Rank(String),

    #[error("component {index} is below the detection edge (reduce the rank)")]
    Subcritical { index: usize },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("invalid argument: {0}")]
    Arg(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("non-finite values produced at iteration {iteration} in modality {modality}")]
    Divergence { iteration: usize, modality: String },

    #[error("linear algebra failure: {0}")]
    Linalg(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
