use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{message}")]
    Invalid { field: Option<String>, message: String },

    #[error("unknown session {0}")]
    NotFound(String),

    #[error("{0}")]
    Conflict(String),

    #[error("{0}")]
    Internal(String),
}

impl From<pairtune_core::Error> for ServiceError {
    fn from(e: pairtune_core::Error) -> Self {
        use pairtune_core::Error as E;
        match e {
            E::Validation { parameter, reason } => ServiceError::Invalid {
                message: format!("{parameter}: {reason}"),
                field: Some(parameter),
            },
            E::InvalidSpace(_) | E::InvalidArgument(_) | E::Budget { .. } | E::DuplicateId(_) | E::Csv(_) => {
                ServiceError::Invalid {
                    field: None,
                    message: e.to_string(),
                }
            }
            E::State(m) => ServiceError::Conflict(m),
            other => ServiceError::Internal(other.to_string()),
        }
    }
}

impl From<std::io::Error> for ServiceError {
    fn from(e: std::io::Error) -> Self {
        ServiceError::Internal(format!("io: {e}"))
    }
}

impl From<serde_json::Error> for ServiceError {
    fn from(e: serde_json::Error) -> Self {
        ServiceError::Internal(format!("json: {e}"))
    }
}
