use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid artifact `{id}`: {reason}")]
    InvalidArtifact { id: String, reason: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("duplicate artifact id `{0}`")]
    DuplicateArtifact(String),
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("slot `{0}` is not registered in the vocabulary")]
    UnregisteredSlot(String),
    #[error("prompt has {len} tokens but the encoder accepts at most {max}")]
    PromptTooLong { len: usize, max: usize },
    #[error("missing subset for subject `{subject}` and artifact `{artifact}`")]
    MissingSubset { subject: String, artifact: String },
    #[error("embedding bank is incomplete: {0}")]
    IncompleteBank(String),
    #[error("loss became non-finite at step {step} ({detail})")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("partition mismatch: {0}")]
    Partition(String),
    #[error("ratio undefined: similarity to blemished references is zero")]
    UndefinedRatio,
    #[error("embedder error: {0}")]
    Embedder(String),
    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },
    #[error("i/o error at {path}: {source}")]
    PathIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            reason: reason.into(),
        }
    }

    pub(crate) fn at(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::PathIo { path, source }
    }
}
