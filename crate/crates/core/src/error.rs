use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by the core crate.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A precondition on an argument was violated.
    Contract(String),
    /// Token id outside the vocabulary.
    Vocabulary { token: usize, vocab_size: usize },
    /// A vector with zero L2 norm cannot be normalized.
    ZeroNorm,
    /// Invalid configuration value.
    Config(String),
    /// Dataset generation or batching failure.
    Data(String),
    /// Training produced a non-finite loss.
    Diverged { step: usize },
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => {
                write!(f, "dimension error in {op}: {lhs:?} vs {rhs:?}")
            }
            Error::Contract(msg) => write!(f, "contract violated: {msg}"),
            Error::Vocabulary { token, vocab_size } => {
                write!(f, "token id {token} out of range for vocabulary of {vocab_size}")
            }
            Error::ZeroNorm => write!(f, "cannot normalize a zero-norm vector"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Diverged { step } => write!(f, "loss became non-finite at step {step}"),
        }
    }
}

impl core::error::Error for Error {}
