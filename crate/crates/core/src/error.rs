use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("unsupported transform kind `{0}` for this operation")]
    UnsupportedTransform(&'static str),

    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: usize, what: String },

    #[error("schedule index order violated: t={t}, t_prev={t_prev}")]
    ScheduleOrder { t: usize, t_prev: usize },

    #[error("missing {0}")]
    Missing(String),

    #[error("empty mask: {0}")]
    EmptyMask(&'static str),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape(_)
                | Error::Invalid(_)
                | Error::UnsupportedTransform(_)
                | Error::EmptyMask(_)
                | Error::ScheduleOrder { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
