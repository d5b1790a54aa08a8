use alloc::string::String;
use core::fmt;

/// Errors raised by the simulation core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A configuration or spec value is out of its allowed range.
    InvalidSpec(String),
    /// Two vectors or matrices that must agree in size do not.
    DimensionMismatch { expected: usize, found: usize },
    /// An input or intermediate value is NaN or infinite.
    NonFinite(&'static str),
    /// A frame was pushed into a window out of streaming order.
    OutOfOrder { expected: usize, found: usize },
    /// Sampling from an empty window.
    EmptyBuffer,
    /// The reconstruction loss was requested with nothing masked.
    EmptyMask,
    /// The requested operation does not exist for this model family or stream kind.
    Unsupported(&'static str),
    /// A training or adaptation run produced a non-finite loss.
    Diverged { step: usize, what: &'static str },
    /// A matrix is singular or violates the required curvature bound.
    IllConditioned(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidSpec(msg) => write!(f, "invalid spec: {msg}"),
            Error::DimensionMismatch { expected, found } => {
                write!(f, "dimension mismatch: expected {expected}, found {found}")
            }
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::OutOfOrder { expected, found } => {
                write!(f, "out-of-order push: expected frame {expected}, got {found}")
            }
            Error::EmptyBuffer => f.write_str("cannot sample from an empty window"),
            Error::EmptyMask => f.write_str("reconstruction loss needs at least one masked position"),
            Error::Unsupported(what) => write!(f, "unsupported: {what}"),
            Error::Diverged { step, what } => write!(f, "non-finite {what} at step {step}"),
            Error::IllConditioned(msg) => write!(f, "ill-conditioned problem: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn ensure_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}
