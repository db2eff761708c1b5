use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Everything that can go wrong inside the numerical core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for `op`.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    RankError {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    ElementCountMismatch {
        from: usize,
        to: usize,
    },
    /// A shape with a zero extent, rank above 4, or data of the wrong length.
    InvalidShape(Vec<usize>),
    NonScalarLoss(Vec<usize>),
    /// An operation produced NaN or infinity.
    NonFinite {
        op: &'static str,
    },
    DuplicateParameter(String),
    UnknownParameter(String),
    UnknownTokenId(u16),
    TextTooLong {
        len: usize,
        max: usize,
    },
    EmptyMask,
    GenerationExhausted {
        attempts: usize,
    },
    NotUnique,
    IncompatibleTeacher(String),
    StateShapeMismatch(String),
    InvalidConfig(String),
    EmptyDataset,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch {left:?} vs {right:?}")
            }
            Error::RankError { op, expected, got } => {
                write!(f, "{op}: expected rank {expected}, got {got}")
            }
            Error::ElementCountMismatch { from, to } => {
                write!(f, "reshape: cannot map {from} elements onto {to}")
            }
            Error::InvalidShape(s) => write!(f, "invalid tensor shape {s:?}"),
            Error::NonScalarLoss(s) => write!(f, "backward needs a scalar loss, got shape {s:?}"),
            Error::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
            Error::DuplicateParameter(n) => write!(f, "duplicate parameter name `{n}`"),
            Error::UnknownParameter(n) => write!(f, "unknown parameter `{n}`"),
            Error::UnknownTokenId(id) => write!(f, "unknown token id {id}"),
            Error::TextTooLong { len, max } => {
                write!(f, "expression has {len} tokens, maximum is {max}")
            }
            Error::EmptyMask => f.write_str("key mask has no real tokens"),
            Error::GenerationExhausted { attempts } => {
                write!(f, "scene generation gave up after {attempts} attempts")
            }
            Error::NotUnique => f.write_str("target is not uniquely described"),
            Error::IncompatibleTeacher(why) => write!(f, "incompatible teacher: {why}"),
            Error::StateShapeMismatch(n) => write!(f, "optimizer state does not match `{n}`"),
            Error::InvalidConfig(why) => write!(f, "invalid configuration: {why}"),
            Error::EmptyDataset => f.write_str("dataset is empty"),
        }
    }
}

impl core::error::Error for Error {}
