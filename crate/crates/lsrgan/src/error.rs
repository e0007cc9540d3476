//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation received tensors with incompatible shapes.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// Backward was requested from a tensor that is not a scalar.
    #[error("backward requires a scalar output, got shape {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },

    /// The input of `input_gradient` does not feed into the output.
    #[error("input tensor is not an ancestor of the requested output")]
    NotAncestor,

    /// A loss or gradient became NaN/Inf; the run must stop.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Invalid argument outside of shape errors (zero vector, empty batch, ...).
    #[error("{0}")]
    InvalidArgument(String),

    /// Problem in a data file, with a 1-based line number when known.
    #[error("data error in {path}{}: {msg}", .line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Data {
        path: String,
        line: Option<usize>,
        msg: String,
    },

    /// Bad configuration (unknown key, out-of-range value, ...).
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn data(path: impl Into<String>, line: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric abort, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data { .. } | Error::Io(_) => 3,
            Error::NonFinite { .. } => 4,
            _ => 1,
        }
    }
}
