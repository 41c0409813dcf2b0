//! Error type shared by the numeric modules.

use std::fmt;

pub type Result<T> = std::result::Result<T, KernelError>;

/// Errors raised by kernels, blocks, and the backbone.
#[derive(Clone, Debug, PartialEq)]
pub enum KernelError {
    /// Constructor data length does not match the shape product.
    DataLength { expected: usize, got: usize },
    /// Two operands cannot be combined.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An operand does not have the rank or shape an operation requires.
    BadOperand { op: &'static str, reason: String },
    /// A kernel produced or received a NaN/Inf; tensors must stay finite.
    NonFinite { op: &'static str },
    /// top-k selection count out of `1..=n`.
    KOutOfRange { k: usize, n: usize },
    /// Keep rate outside `(0, 1]`.
    InvalidKeepRate { rate: f64 },
    /// Selection needs at least two candidate patch tokens.
    TooFewTokens { n: usize },
    /// Guidance restricted to image columns carried no attention mass.
    DegenerateGuidance,
    /// A mode that requires a guidance vector was run without one.
    MissingGuidance,
    /// Configuration violates a documented invariant.
    InvalidConfig { reason: String },
    /// A gradient check was asked to run on an instance whose selection
    /// margin is too small for the finite-difference step.
    TieMarginTooSmall { margin: f64, eps: f64 },
}

impl fmt::Display for KernelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DataLength { expected, got } => {
                write!(
                    f,
                    "data length {got} does not match shape product {expected}"
                )
            }
            Self::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Self::BadOperand { op, reason } => write!(f, "{op}: {reason}"),
            Self::NonFinite { op } => write!(f, "{op}: non-finite value"),
            Self::KOutOfRange { k, n } => write!(f, "top-k: k={k} out of range 1..={n}"),
            Self::InvalidKeepRate { rate } => {
                write!(f, "keep rate {rate} outside (0, 1]")
            }
            Self::TooFewTokens { n } => {
                write!(f, "selection needs at least 2 patch tokens, got {n}")
            }
            Self::DegenerateGuidance => {
                write!(f, "guidance attention mass on image tokens is zero")
            }
            Self::MissingGuidance => write!(f, "guidance vector required but absent"),
            Self::InvalidConfig { reason } => write!(f, "invalid config: {reason}"),
            Self::TieMarginTooSmall { margin, eps } => {
                write!(
                    f,
                    "selection tie margin {margin:e} not above 10*eps with eps={eps:e}"
                )
            }
        }
    }
}

impl std::error::Error for KernelError {}
