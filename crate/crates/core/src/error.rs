use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum DssError {
    #[error("parameter out of domain: {0}")]
    ParameterDomain(String),

    #[error("horizon must be at least one time step")]
    EmptyHorizon,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("derivative with respect to |beta| is undefined at beta = 0")]
    ZeroCoefficient,

    #[error("degenerate design: regressor value must be nonzero")]
    DegenerateDesign,

    #[error("nonpositive M-step denominator {denominator} at (t = {t}, j = {j})")]
    NonpositiveDenominator { t: usize, j: usize, denominator: f64 },

    #[error("objective became non-finite at iteration {iteration} (coordinate t = {t}, j = {j})")]
    Divergence { iteration: usize, t: usize, j: usize },

    #[error("solver did not reach tolerance: {0}")]
    NotConverged(String),

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DssError {
    /// True for errors that come from bad user input (flags, config files) rather than data or numerics.
    pub fn is_configuration(&self) -> bool {
        matches!(
            self,
            DssError::ParameterDomain(_)
                | DssError::EmptyHorizon
                | DssError::Configuration(_)
        )
    }

    /// True for errors that come from reading or validating input data.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            DssError::Dimension(_)
                | DssError::Parse { .. }
                | DssError::EmptyInput(_)
                | DssError::Io(_)
                | DssError::Csv(_)
                | DssError::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, DssError>;
