use thiserror::Error;

/// Errors surfaced by the estimation pipeline.
///
/// Variants are grouped by the stage that raises them so callers (notably
/// the CLI) can map them onto stable exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-contract input data.
    #[error("validation: {0}")]
    Validation(String),

    /// A municipality falls inside the smallest analysis radius of two
    /// distinct opening events. Downstream treatment assignment assumes a
    /// unique event per municipality, so this is fatal rather than a warning.
    #[error("buffer overlap: {0}")]
    Overlap(String),

    /// A year cell cannot be standardized (fewer than two rows or zero
    /// variance).
    #[error("degenerate scale in year {year}: {detail}")]
    DegenerateScale { year: i32, detail: String },

    /// A model specification references something that does not exist.
    #[error("specification: {0}")]
    Spec(String),

    /// Non-finite or otherwise unusable values encountered while building
    /// numeric columns.
    #[error("data: {0}")]
    Data(String),

    /// Invalid run configuration (window coverage, parameter bounds, ...).
    #[error("configuration: {0}")]
    Config(String),

    /// Fixed-effect absorption failed to reach the tolerance.
    #[error(
        "absorption did not converge after {iterations} sweeps \
         (max group residual {max_group_residual:.3e})"
    )]
    NonConvergence {
        iterations: usize,
        max_group_residual: f64,
    },

    /// No usable regressors remain after collinearity drops.
    #[error("degenerate model: {0}")]
    DegenerateModel(String),

    /// Cluster-robust inference is impossible (e.g. a single cluster).
    #[error("inference: {0}")]
    Inference(String),

    /// A hypothesis test could not be computed.
    #[error("hypothesis test: {0}")]
    Test(String),

    /// The requested estimation sample is empty or unusable.
    #[error("sample: {0}")]
    Sample(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
