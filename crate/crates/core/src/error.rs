use thiserror::Error;

/// Errors raised by the trustfed library.
///
/// Display strings start with a stable kebab-case code so that callers
/// (and the CLI) can match on them without depending on the variant layout.
#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient-history: need at least {needed} points, got {got}")]
    InsufficientHistory { needed: usize, got: usize },

    #[error("too-many-clusters: requested {k} clusters for {rows} rows")]
    TooManyClusters { k: usize, rows: usize },

    #[error("invalid-input: {0}")]
    InvalidInput(String),

    #[error("inconsistent-counters: success {success} > deployed {deployed}")]
    InconsistentCounters { success: u64, deployed: u64 },

    #[error("context-schema-mismatch: {0}")]
    ContextSchemaMismatch(String),

    #[error("empty-training-set")]
    EmptyTrainingSet,

    #[error("no-feasible-solution")]
    NoFeasibleSolution,

    #[error("empty-dataset")]
    EmptyDataset,

    #[error("shape-mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("unknown-behavior: {0}")]
    UnknownBehavior(String),

    #[error("invalid-spec: {0}")]
    InvalidSpec(String),

    #[error("invalid-weights: weights sum to {sum}, expected 1")]
    InvalidWeights { sum: f64 },

    #[error("invalid-config: {field}: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("evicted-id: client {0} was evicted and may not rejoin")]
    EvictedId(u32),

    #[error("duplicate-id: client {0}")]
    DuplicateId(u32),

    #[error("malformed-row: line {line}: {message}")]
    MalformedRow { line: u64, message: String },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
