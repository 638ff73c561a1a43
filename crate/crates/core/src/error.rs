use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("validation error: {0}")]
    Validation(String),

    /// Non-finite values found while decoding; carries the offending point indices.
    #[error("non-finite values at point indices {indices:?}")]
    NonFinite { indices: Vec<usize> },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("lifecycle error: {0}")]
    Lifecycle(String),

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than a fault in the tool.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Io(e) => matches!(
                e.kind(),
                std::io::ErrorKind::NotFound | std::io::ErrorKind::InvalidInput
            ),
            Error::Format(_)
            | Error::Validation(_)
            | Error::NonFinite { .. }
            | Error::Shape(_)
            | Error::Domain(_)
            | Error::Capacity(_)
            | Error::Json(_) => true,
            Error::Lifecycle(_) | Error::DegenerateEmbedding(_) | Error::Divergence(_) => false,
        }
    }
}
