use thiserror::Error;

use crate::channel::Channel;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value for {field}: {reason}")]
    Validation { field: &'static str, reason: String },

    #[error("channel {0} has no present value to impute from")]
    AllMissing(Channel),

    #[error("frame is missing channel {0}")]
    MissingChannel(Channel),

    #[error("window {window} is larger than series length {len}")]
    WindowTooLarge { window: usize, len: usize },

    #[error("empty training data")]
    EmptyData,

    #[error("training data contains a single class")]
    SingleClass,

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("model bundle is not trained")]
    Untrained,

    #[error("controller failed at tick {tick}: {reason}")]
    Controller { tick: u64, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Validation { field, reason: reason.into() }
    }
}

pub(crate) fn ensure_finite(field: &'static str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("{v} is not finite")))
    }
}

pub(crate) fn ensure_prob(field: &'static str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("{p} is not a probability")))
    }
}
