use std::io;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes, layer parameters or network topology are inconsistent.
    #[error("configuration error{}: {message}", layer_suffix(.layer))]
    Config {
        layer: Option<usize>,
        message: String,
    },

    /// A caller violated an operation's preconditions.
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed text input (network config, annotations, scenarios).
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("bad magic: expected \"LCDT\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported model file version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("CRC mismatch in record {record}: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch {
        record: usize,
        stored: u32,
        computed: u32,
    },

    #[error("truncated model file: {0}")]
    Truncated(String),

    /// NaN/Inf observed in a numeric pipeline.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

fn layer_suffix(layer: &Option<usize>) -> String {
    match layer {
        Some(idx) => format!(" in layer {idx}"),
        None => String::new(),
    }
}

impl Error {
    pub fn config(message: impl Into<String>) -> Self {
        Error::Config {
            layer: None,
            message: message.into(),
        }
    }

    /// Attach a layer index to a configuration error that lacks one.
    pub fn in_layer(self, idx: usize) -> Self {
        match self {
            Error::Config {
                layer: None,
                message,
            } => Error::Config {
                layer: Some(idx),
                message,
            },
            other => other,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
