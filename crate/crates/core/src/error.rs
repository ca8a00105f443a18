use std::io;

/// Errors produced anywhere in the crate.
///
/// The variants follow the failure classes callers are expected to react to
/// differently: configuration problems are user errors, contract and state
/// errors are programming errors, and `Invariant` means a run produced output
/// that disagrees with its oracle.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid state transition: {0}")]
    State(String),

    #[error("request needs {need} pages but the pool only has {capacity}")]
    ImpossibleRequest { need: usize, capacity: usize },

    #[error("KV pool exhausted: {0}")]
    OutOfPages(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("degenerate cost parameters: {0}")]
    Degenerate(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn contract_err(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
