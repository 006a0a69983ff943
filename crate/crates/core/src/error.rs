use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Autodiff(#[from] gncde_autodiff::AutodiffError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CoreError {
    /// Whether the failure is a numeric abort (NaN/Inf loss, gradient or state)
    /// rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            CoreError::Numeric(_) | CoreError::Autodiff(gncde_autodiff::AutodiffError::NonFiniteGradient { .. })
        )
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
