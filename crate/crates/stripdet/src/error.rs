//! Crate-wide error type.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// A constructor received data whose length does not match the declared dims.
    LengthMismatch { expected: usize, actual: usize },
    /// Two tensors fed to a binary op have incompatible shapes.
    ShapeMismatch {
        op: &'static str,
        left: [usize; 4],
        right: [usize; 4],
    },
    /// An op received a tensor with the wrong channel count.
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    /// Invalid layer or model specification (kernel geometry, groups, grid, ...).
    InvalidSpec(String),
    /// A computation produced or received a NaN/Inf where finite values are required.
    NonFinite(String),
    /// Loss slot handed to backward() is not a scalar.
    NonScalarLoss { dims: [usize; 4] },
    Io(std::io::Error),
    /// Malformed input file (weights container, point cloud, run config).
    Format(String),
    /// Run-config or model-config validation failure.
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::LengthMismatch { expected, actual } => {
                write!(f, "length mismatch: expected {expected} values, got {actual}")
            }
            Error::ShapeMismatch { op, left, right } => write!(
                f,
                "{op}: shape mismatch between {}x{}x{}x{} and {}x{}x{}x{}",
                left[0], left[1], left[2], left[3], right[0], right[1], right[2], right[3]
            ),
            Error::ChannelMismatch { op, expected, actual } => {
                write!(f, "{op}: expected {expected} input channels, got {actual}")
            }
            Error::InvalidSpec(msg) => write!(f, "invalid spec: {msg}"),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::NonScalarLoss { dims } => write!(
                f,
                "backward requires a scalar loss, got {}x{}x{}x{}",
                dims[0], dims[1], dims[2], dims[3]
            ),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Format(msg) => write!(f, "{msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
