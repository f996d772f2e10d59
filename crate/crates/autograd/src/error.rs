use std::fmt;

/// Errors raised by tape operations, the optimizer, and checkpoint I/O.
#[derive(Debug)]
pub enum Error {
    /// Two operand shapes cannot be combined by the requested op.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single operand has a shape the op cannot accept.
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        expected: String,
    },
    /// Tensor constructor got data whose length does not match the shape.
    DataLength { expected: usize, got: usize },
    /// `backward` was called on a non-scalar value.
    NonScalarLoss { shape: Vec<usize> },
    /// Optimizer stepped a parameter that has no gradient.
    MissingGrad { name: String },
    /// Checkpoint file is malformed (bad magic, version, or truncation).
    Checkpoint { path: String, reason: String },
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::BadShape { op, shape, expected } => {
                write!(f, "{op}: bad shape {shape:?}, expected {expected}")
            }
            Error::DataLength { expected, got } => {
                write!(f, "tensor data length {got} does not match shape product {expected}")
            }
            Error::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::MissingGrad { name } => {
                write!(f, "parameter '{name}' has no gradient")
            }
            Error::Checkpoint { path, reason } => {
                write!(f, "checkpoint '{path}': {reason}")
            }
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
