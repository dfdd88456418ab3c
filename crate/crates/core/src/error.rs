use std::io;

use thiserror::Error;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    /// A shape, dtype or model/config invariant was violated.
    #[error("configuration error: {0}")]
    Config(String),
    /// Input data (token ids, targets, shard payload) is invalid.
    #[error("data error: {0}")]
    Data(String),
    /// A file did not match the expected binary layout.
    #[error("format error: {0}")]
    Format(String),
    /// An API was driven in an order it does not support.
    #[error("usage error: {0}")]
    Usage(String),
    /// A forward or optimizer step produced NaN/Inf.
    #[error("non-finite value in {op}: {detail}")]
    NonFinite { op: &'static str, detail: String },
    /// An iterative numerical routine failed to reach its tolerance.
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
