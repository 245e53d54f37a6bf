//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input failed validation (bad geometry, NaN predictions, shape
    /// mismatches, malformed files). Maps to CLI exit code 2.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// `exp(tw)` or `exp(th)` exceeded the decode guard of 1e8 grid cells.
    #[error("decode overflow at anchor {anchor}: exp({offset}) exceeds 1e8")]
    DecodeOverflow { anchor: usize, offset: f64 },

    /// One-to-one assignment with more ground truths than anchors.
    #[error("infeasible matching: {num_gts} ground truths but only {num_anchors} anchors")]
    Infeasible { num_gts: usize, num_anchors: usize },

    /// A NaN or infinity surfaced mid-computation. Maps to CLI exit code 3.
    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::NumericFailure(msg.into())
    }
}
