use std::path::PathBuf;

use crate::data::Setting;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate record ({model_id}, {example_id}, {setting}) at line {line}")]
    DuplicateKey {
        line: usize,
        model_id: String,
        example_id: String,
        setting: Setting,
    },

    #[error("line {line} references unknown example_id {example_id:?}")]
    DanglingReference { line: usize, example_id: String },

    #[error("duplicate example_id {0:?} in query manifest")]
    DuplicateQuery(String),

    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),

    #[error("model {model_id} has no {missing} record for {example_id}")]
    Unpaired {
        model_id: String,
        example_id: String,
        missing: Setting,
    },

    #[error("unknown model_id {0:?}")]
    UnknownModel(String),

    #[error("empty set: {0}")]
    EmptySet(String),

    #[error("model {model_id} has an empty {zone} zone")]
    EmptyZone { model_id: String, zone: String },

    #[error("input mismatch: {0}")]
    Mismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("missing embedding for {0:?}")]
    MissingEmbedding(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("demonstration {0:?} is the target query")]
    DemoIsTarget(String),

    #[error("replay cache miss ({kind}) for key {key}")]
    CacheMiss { kind: &'static str, key: String },

    #[error("transport error after {retries} retries: {message}")]
    Transport { message: String, retries: u32 },

    #[error("endpoint does not support {0}")]
    Unsupported(String),

    #[error("gateway has no live backend configured")]
    NoBackend,

    #[error("scorer failed at step {step}: {source}")]
    Scorer {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("AUC undefined: labels contain a single class")]
    SingleClass,

    #[error("zero variance input")]
    ZeroVariance,

    #[error("ragged loss log: {0}")]
    RaggedEpochs(String),

    #[error("missing probability for {0:?}")]
    MissingProbability(String),

    #[error("invalid model file: {0}")]
    Format(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
