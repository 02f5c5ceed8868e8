use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Errors produced by the core library.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands disagree on shape.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A tensor's data length disagrees with the product of its shape.
    DataLength { shape: Vec<usize>, len: usize },
    NonFinite { context: &'static str },
    Empty { context: &'static str },
    InvalidSpec(String),
    InvalidArgument(String),
    /// Fast Hadamard paths need a power-of-two length.
    NotPowerOfTwo { len: usize },
    /// An explicit transform is singular or too badly conditioned to invert.
    IllConditioned { condition: f64 },
    NotOrthogonal { deviation: f64 },
    /// Cholesky factorisation of a (damped) Hessian failed.
    Factorization { retries: usize },
    /// A model surgery step was requested out of order.
    InvalidState(String),
    TokenOutOfRange { token: u32, vocab: usize },
    /// A metric evaluation inside an alpha search failed.
    AlphaSearch { alpha: f32, source: Box<Error> },
    /// Weight quantization failed for a named layer.
    Layer { layer: String, source: Box<Error> },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch between {left:?} and {right:?}")
            }
            Error::DataLength { shape, len } => {
                write!(f, "data length {len} does not match shape {shape:?}")
            }
            Error::NonFinite { context } => write!(f, "{context}: non-finite value"),
            Error::Empty { context } => write!(f, "{context}: empty input"),
            Error::InvalidSpec(msg) => write!(f, "invalid quantization spec: {msg}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NotPowerOfTwo { len } => write!(
                f,
                "length {len} is not a power of two; use an explicit-matrix transform instead"
            ),
            Error::IllConditioned { condition } => {
                write!(f, "transform is ill-conditioned (condition estimate {condition:e})")
            }
            Error::NotOrthogonal { deviation } => {
                write!(f, "matrix is not orthogonal (max |QtQ - I| = {deviation:e})")
            }
            Error::Factorization { retries } => {
                write!(f, "Hessian factorization failed after {retries} damping retries")
            }
            Error::InvalidState(msg) => write!(f, "invalid transform state: {msg}"),
            Error::TokenOutOfRange { token, vocab } => {
                write!(f, "token id {token} out of range for vocabulary of {vocab}")
            }
            Error::AlphaSearch { alpha, source } => {
                write!(f, "metric evaluation failed at alpha={alpha}: {source}")
            }
            Error::Layer { layer, source } => write!(f, "{layer}: {source}"),
        }
    }
}

impl core::error::Error for Error {}
