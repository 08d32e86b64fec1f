use std::path::PathBuf;

/// Errors raised across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("document {index} has {len} tokens, above the hard cap of {cap}")]
    DocumentTooLong { index: usize, len: usize, cap: usize },

    #[error("corpus holds {available} tokens, fewer than one chunk of {chunk}")]
    CorpusTooShort { available: usize, chunk: usize },

    #[error("sequence of {len} tokens exceeds the context length {context}")]
    SequenceTooLong { len: usize, context: usize },

    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },

    #[error("intrinsic dimension {d} exceeds the LoRA parameter count {d_lora}")]
    IntrinsicDimTooLarge { d: usize, d_lora: usize },

    #[error("intrinsic dimension {0} has no usable factorization (prime above 1000)")]
    InfeasibleFactorization(usize),

    #[error("non-finite loss in batch element {batch_index}")]
    NonFiniteLoss { batch_index: usize },

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("smoothing coefficient {0} outside (0, 1]")]
    InvalidAlpha(f64),

    #[error("hyperparameter `{name}` value {value} is not in its declared grid")]
    NotInGrid { name: String, value: String },

    #[error("empty grid for `{0}`")]
    EmptyGrid(&'static str),

    #[error("checkpoint has no quantized weights")]
    MissingQuantization,

    #[error("corrupt {what}: {detail}")]
    Corrupt { what: &'static str, detail: String },

    #[error("training diverged at step {step}: {source}")]
    Diverged {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io { path: path.into(), source })
    }
}
