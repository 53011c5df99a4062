use thiserror::Error;

pub type Result<T> = std::result::Result<T, ChmmError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChmmError {
    /// An argument lies outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Row sums, probability bounds or positivity constraints violated.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("stationary distribution is not unique: {0}")]
    NonUniqueStationary(String),

    #[error("data error: {0}")]
    Data(String),

    /// Every state has zero likelihood at some time step.
    #[error("data/model mismatch at time index {t}: all states have zero likelihood")]
    DataModelMismatch { t: usize },

    #[error("numerical error: {0}")]
    Numeric(String),

    #[error("no restart converged ({} attempted): {}", .diagnostics.len(), .diagnostics.join("; "))]
    NoConvergence { diagnostics: Vec<String> },

    #[error("model comparison error: {0}")]
    Comparison(String),
}

impl ChmmError {
    /// Whether the error stems from the input data rather than the model or numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(self, ChmmError::Data(_) | ChmmError::DataModelMismatch { .. })
    }

    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            ChmmError::Numeric(_)
                | ChmmError::NoConvergence { .. }
                | ChmmError::NonUniqueStationary(_)
        )
    }
}
