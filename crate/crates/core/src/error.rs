use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("token id {id} out of vocabulary of size {vocab}")]
    Vocabulary { id: usize, vocab: usize },
    #[error("degenerate batch: every target position is masked")]
    DegenerateBatch,
    #[error("non-finite value in {0}")]
    Numeric(String),
    #[error("training loop: {0}")]
    TrainingLoop(String),
    #[error("attention row {row} has no unmasked key")]
    AttentionDegeneracy { row: usize },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("template arity: {0}")]
    TemplateArity(String),
    #[error("mode error: {0}")]
    Mode(String),
    #[error("state error: {0}")]
    State(String),
    #[error("oracle error: {0}")]
    Oracle(String),
    #[error("out-of-vocabulary word {word:?} for {language}")]
    OutOfVocabulary { word: String, language: String },
    #[error("storage error at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corruption(String),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("incompatible components: {0}")]
    Compatibility(String),
    #[error("cannot resolve {0}")]
    Resolution(String),
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn storage(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Storage {
            path: path.into(),
            source,
        }
    }
}
