use thiserror::Error;

/// Errors raised across the library.
///
/// The CLI maps [`Error::Config`] to exit status 2 and every other variant to 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("time ordering error: s = {s} > t = {t}")]
    Ordering { s: f64, t: f64 },
    #[error("state space of {states} states exceeds oracle capacity {cap}")]
    Capacity { states: u128, cap: usize },
    #[error("step size {dt} too large: one-step probability {prob} < 0")]
    StepSize { dt: f64, prob: f64 },
    #[error("sequences are not Hamming-1 neighbors")]
    Adjacency,
    #[error("singular rank-one system: |1 + v^T M^-1 u| = {0:e}")]
    Singular(f64),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("internal state error: {0}")]
    InternalState(String),
    #[error("not enough data: need at least {need}, got {got}")]
    Length { need: usize, got: usize },
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// `true` for errors caused by malformed configuration rather than by the numerics.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Parse(_))
    }
}
