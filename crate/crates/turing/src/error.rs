use thiserror::Error;

pub type ServiceResult<T> = Result<T, ServiceError>;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("not found: {0}")]
    NotFound(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("invalid request: {0}")]
    Validation(String),

    #[error("storage error: {0}")]
    Storage(#[from] rusqlite::Error),

    #[error("internal error: {0}")]
    Internal(String),
}

impl From<embryogen_core::Error> for ServiceError {
    fn from(e: embryogen_core::Error) -> Self {
        use embryogen_core::Error as E;
        match e {
            E::Invalid(_) | E::UnknownImage(_) | E::Composition(_) | E::InsufficientPool { .. } => {
                ServiceError::Validation(e.to_string())
            }
            other => ServiceError::Internal(other.to_string()),
        }
    }
}

impl ServiceError {
    /// Short machine-readable kind used in error bodies.
    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::Validation(_) => "invalid",
            ServiceError::Storage(_) => "storage",
            ServiceError::Internal(_) => "internal",
        }
    }
}
