use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("failed to parse {path}: {msg} (byte offset {offset})")]
    Parse {
        path: PathBuf,
        offset: usize,
        msg: String,
    },

    #[error("malformed data in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("unsupported format version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch}: \
         cls={cls} theta={theta} scale={scale} total={total}"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        cls: f64,
        theta: f64,
        scale: f64,
        total: f64,
    },

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
