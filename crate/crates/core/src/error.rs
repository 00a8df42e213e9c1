use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("operation `{op}` is not available in {mode} mode")]
    Mode { op: &'static str, mode: &'static str },
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("unknown band `{name}` (available: {})", available.join(", "))]
    UnknownBand { name: String, available: Vec<String> },
    #[error("training diverged at iteration {iteration}: loss is not finite")]
    Divergence { iteration: usize },
    #[error("band `{band}`: {reason}")]
    Band { band: String, reason: String },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Error {
    Error::Shape { op, left, right }
}
