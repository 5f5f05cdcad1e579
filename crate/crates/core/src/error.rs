use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("degenerate projection: pre-normalization vector has zero norm")]
    DegenerateProjection,

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("degenerate evaluation: no pixel survives the evaluation protocol")]
    DegenerateEvaluation,

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("bounds error: {0}")]
    Bounds(String),

    #[error("ingestion error in {path} row {row}: {msg}", path = .path.display())]
    Ingestion { path: PathBuf, row: usize, msg: String },

    #[error("format error in {path}: {msg}", path = .path.display())]
    Format { path: PathBuf, msg: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("i/o error on {path}: {source}", path = .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable tag, used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::DegenerateProjection => "degenerate-projection",
            Error::DegenerateSample(_) => "degenerate-sample",
            Error::DegenerateEvaluation => "degenerate-evaluation",
            Error::Pairing(_) => "pairing",
            Error::Input(_) => "input",
            Error::Bounds(_) => "bounds",
            Error::Ingestion { .. } => "ingestion",
            Error::Format { .. } => "format",
            Error::CorruptCheckpoint(_) => "corrupt-checkpoint",
            Error::DigestMismatch { .. } => "digest-mismatch",
            Error::NonFinite(_) => "non-finite",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
