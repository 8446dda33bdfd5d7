use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("text of length {len} does not fit in max_len {max_len} (one slot is reserved for eos)")]
    Length { len: usize, max_len: usize },

    #[error("layout: {0}")]
    Layout(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("TPS system is singular even after diagonal regularization")]
    SingularTps,

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::Length { .. } => 2,
            Error::Numeric(_) | Error::SingularTps => 4,
            Error::Layout(_)
            | Error::Data(_)
            | Error::Manifest { .. }
            | Error::Checkpoint(_)
            | Error::Io { .. }
            | Error::Json(_) => 3,
        }
    }

    /// Short machine-readable category name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Length { .. } => "length",
            Error::Layout(_) => "layout",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Manifest { .. } => "manifest",
            Error::SingularTps => "singular-tps",
            Error::Numeric(_) => "numeric",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
