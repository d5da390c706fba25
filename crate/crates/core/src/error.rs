use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor shapes or grid sizes.
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid configuration value or unsupported combination.
    #[error("config error: {0}")]
    Config(String),

    /// Input outside the domain an operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),

    /// Misuse of the autodiff tape.
    #[error("tape error: {0}")]
    Tape(String),

    /// Dataset directory does not pair up.
    #[error("dataset listing error: {0}")]
    Listing(String),

    /// Malformed checkpoint or config file.
    #[error("format error: {0}")]
    Format(String),

    /// Checkpoint does not match the model it is loaded into.
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),

    /// Training diverged.
    #[error("non-finite loss at step {step} (term `{term}`)")]
    NonFinite { step: usize, term: String },

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
