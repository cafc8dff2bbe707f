use thiserror::Error;

/// Errors produced by any stage of the bidding pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed field `{field}`: {msg}")]
    MalformedField {
        path: String,
        line: u64,
        field: String,
        msg: String,
    },

    #[error("{path}:{line}: duplicate key `{key}`")]
    DuplicateKey { path: String, line: u64, key: String },

    #[error("{path}: missing or misnamed column `{column}` (expected header `{expected}`)")]
    BadHeader {
        path: String,
        column: String,
        expected: String,
    },

    #[error("{path}:{line}: {msg}")]
    BadFormat { path: String, line: u64, msg: String },

    #[error("interactive metric undefined: ad `{ad_id}` has zero total clicks")]
    UndefinedMetric { ad_id: String },

    #[error("co-click count {co} exceeds total clicks {total} for ad `{ad_id}`")]
    CoClickExceedsTotal { ad_id: String, co: u64, total: u64 },

    #[error("search-term report references unknown ad `{ad_id}`")]
    UnknownAdId { ad_id: String },

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("checkpoint shape mismatch for `{tensor}`: expected {expected}, found {found}")]
    ShapeMismatch {
        tensor: String,
        expected: String,
        found: String,
    },

    #[error("checkpoint was trained against a different vocabulary (hash {expected:#018x}, file has {found:#018x})")]
    VocabHashMismatch { expected: u64, found: u64 },

    #[error("training set is empty: {context}")]
    EmptyTrainingSet { context: String },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("product-type classifier needs at least two distinct labels, got {labels}")]
    SingleLabel { labels: usize },

    #[error("multi-item ad `{ad_id}` has no catalog product type and no classifier was provided")]
    ClassifierRequired { ad_id: String },

    #[error("ad `{ad_id}` has no embedding")]
    MissingEmbedding { ad_id: String },

    #[error("normal equations are singular; pass a ridge penalty l2 > 0")]
    SingularSystem,

    #[error("prediction/sample length mismatch: {preds} predictions vs {samples} samples")]
    LengthMismatch { preds: usize, samples: usize },

    #[error("dataset too small: need at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no group has positive predicted revenue per click")]
    NoPositiveRpc,

    #[error("config error: {0}")]
    Config(String),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
