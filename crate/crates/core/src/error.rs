use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands disagree on shape.
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    /// A matrix that must be invertible has (near) zero determinant.
    SingularMatrix { det: f64 },
    /// Invalid architecture or hyperparameter combination.
    Config(String),
    /// Actnorm data-dependent initialization was requested twice.
    AlreadyInitialized,
    /// A finite-difference probe produced a non-finite objective.
    NonFinite { param: String },
    /// Training was requested on an empty split.
    EmptyDataset,
    /// A parameter set does not match the expected architecture.
    ArchitectureMismatch(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, expected, found } => {
                write!(f, "{op}: shape mismatch, expected {expected:?}, found {found:?}")
            }
            Error::SingularMatrix { det } => {
                write!(f, "singular matrix (det = {det:e}); the flow is no longer invertible")
            }
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::AlreadyInitialized => write!(f, "actnorm layers are already initialized"),
            Error::NonFinite { param } => {
                write!(f, "objective is not finite when probing parameter `{param}`")
            }
            Error::EmptyDataset => write!(f, "dataset split is empty"),
            Error::ArchitectureMismatch(msg) => write!(f, "architecture mismatch: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
