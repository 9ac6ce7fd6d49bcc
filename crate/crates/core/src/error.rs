use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image must have 3 channels, got {0}")]
    Channels(usize),

    #[error("image is {height}x{width}; both sides must be at least {min}")]
    TooSmall {
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("image is {height}x{width}, not a multiple of {multiple}; pad it first")]
    Unpadded {
        height: usize,
        width: usize,
        multiple: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{0} is already quantized")]
    AlreadyQuantized(&'static str),

    #[error("{0} must be quantized")]
    NotQuantized(&'static str),

    #[error("text embedding: {0}")]
    Text(String),

    #[error("text backend unavailable: {0}; set text_backend = \"deterministic_stub\" to run offline")]
    TextBackendUnavailable(String),

    #[error("symbol {symbol} at position {index} is outside its pmf support of {support} symbols")]
    SymbolOutOfRange {
        index: usize,
        symbol: usize,
        support: usize,
    },

    #[error("invalid pmf: {0}")]
    Pmf(String),

    #[error("payload truncated after {0} bytes")]
    Truncated(usize),

    #[error("checksum mismatch: stored {stored:#010x}, decoded {decoded:#010x}")]
    Checksum { stored: u32, decoded: u32 },

    #[error("malformed bitstream: {0}")]
    Bitstream(String),

    #[error("bitstream was produced by model {stream:#06x} but checkpoint is {checkpoint:#06x}")]
    ModelMismatch { stream: u16, checkpoint: u16 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("training: {0}")]
    Training(String),

    #[error("bd-rate: {0}")]
    BdRate(String),

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Attaches a description to I/O failures.
pub trait IoContext<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| Error::Io {
            context: what(),
            source,
        })
    }
}
