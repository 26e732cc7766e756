use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("no binding supplied for graph input `{0}`")]
    MissingInput(String),

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("graph has no loss node")]
    NoLoss,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown parameter id `{0}`")]
    UnknownParameter(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("restore requested but no snapshot was taken")]
    NoSnapshot,

    #[error("every modality mask is zero; the model has no trainable path")]
    AllMasked,

    #[error("operation requires an unmasked model ({0})")]
    MaskedModel(String),

    #[error("parameter id sets differ: {0}")]
    IdMismatch(String),

    #[error("ledger is missing entries: {}", .0.join(", "))]
    MissingEntries(Vec<String>),

    #[error("weight `{0}` is not covered by the channel map")]
    Unmapped(String),

    #[error("unknown pruning method `{given}`; valid methods: {}", .valid.join(", "))]
    UnknownMethod {
        given: String,
        valid: Vec<&'static str>,
    },

    #[error("model has {count} parameters, limit is {limit}")]
    ModelTooLarge { count: usize, limit: usize },

    #[error("{what} is corrupt at byte offset {offset}: {detail}")]
    Corrupt {
        what: &'static str,
        offset: u64,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
