use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("category {k} outside 1..={categories}")]
    CategoryRange { k: usize, categories: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid rubric: {0}")]
    Rubric(String),

    #[error("invalid model state: {0}")]
    State(String),

    #[error("covariogram spectrum is identically zero")]
    DegenerateKernel,

    #[error("requested rank {requested} exceeds the {available} available locations")]
    Rank { requested: usize, available: usize },

    #[error("empty truncation interval ({lower}, {upper})")]
    EmptyInterval { lower: f64, upper: f64 },

    #[error("{block} update: design matrix is rank deficient under a flat prior")]
    RankDeficient { block: &'static str },

    #[error("user {user}: every rubric assigns zero likelihood")]
    DegenerateClasses { user: usize },

    #[error("slice sampler started from a point with non-finite log density ({value})")]
    StateCorruption { value: f64 },

    #[error("sweep {iteration}: {source}")]
    Chain {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("tau = {tau}: {source}")]
    Study {
        tau: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("L = {factors}: {source}")]
    FactorStudy {
        factors: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("utility pool has {got} draws, need at least {needed}")]
    InsufficientPool { needed: usize, got: usize },

    #[error("{file}, line {line}: {message}")]
    Parse { file: String, line: usize, message: String },

    #[error("ingest filters removed every rating")]
    FilterTooStrict,

    #[error("sample archive version {found} is not supported (expected {expected})")]
    Version { found: String, expected: String },

    #[error("digest mismatch for {file}")]
    Digest { file: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::DegenerateKernel
            | Error::RankDeficient { .. }
            | Error::DegenerateClasses { .. }
            | Error::StateCorruption { .. } => true,
            Error::Chain { source, .. } | Error::Study { source, .. } | Error::FactorStudy { source, .. } => {
                source.is_numerical()
            }
            _ => false,
        }
    }
}
