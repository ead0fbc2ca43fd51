use thiserror::Error;

/// Errors produced anywhere in the toolkit.
///
/// The variants map onto process exit codes in the CLI: `Config` -> 2,
/// `Data` / `Io` -> 3, `Numeric` -> 4.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A structurally valid request with invalid settings (bad stride,
    /// unknown preset, inconsistent schedule, ...).
    #[error("config error: {0}")]
    Config(String),

    /// A well-formed op applied to out-of-domain values (label out of
    /// range, empty batch, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Dataset files could not be parsed.
    #[error("data error: {0}")]
    Data(#[from] IdxError),

    /// A non-finite value surfaced where the pipeline cannot continue.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Checkpoint file malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Parse failures for the IDX container format.
#[derive(Debug, Error)]
pub enum IdxError {
    #[error("wrong magic in {path}: got {got}, expected {expected}")]
    WrongMagic {
        path: String,
        got: u32,
        expected: u32,
    },

    #[error("truncated file {path}: needed {needed} bytes, had {got}")]
    Truncated {
        path: String,
        needed: usize,
        got: usize,
    },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code the CLI reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::Input(_) | Error::Checkpoint(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
        }
    }

    /// Short machine-readable kind tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Data(_) => "data",
            Error::Numeric(_) => "numeric",
            Error::Io(_) => "io",
            Error::Checkpoint(_) => "checkpoint",
        }
    }
}
