use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: expected {expected:?}, got {got:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },

    #[error("invalid split index {split}: candidates are {candidates:?}")]
    SplitIndex { split: usize, candidates: Vec<usize> },

    #[error("activation mismatch: {0}")]
    ActivationMismatch(String),

    #[error("unit index {index} out of range ({count} units)")]
    UnitOutOfRange { index: usize, count: usize },

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("vectorization mode error: {0}")]
    Mode(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },

    #[error("degenerate labels: both classes need at least {required} examples (got {positives} positive, {negatives} negative)")]
    DegenerateLabels {
        positives: usize,
        negatives: usize,
        required: usize,
    },

    #[error("AUC undefined: test labels contain a single class")]
    UndefinedAuc,

    #[error("undefined direction: concept coefficient vector is all zeros")]
    UndefinedDirection,

    #[error("pair excluded: factual probability {0:e} is too small for a ratio effect")]
    ExcludedPair(f64),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("feature length mismatch: tree expects {expected}, got {got}")]
    FeatureLength { expected: usize, got: usize },

    #[error("missing upstream artifact {artifact}: run stage `{stage}` first")]
    Dependency { stage: String, artifact: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed artifact {path}: {message}")]
    Artifact { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code: 1 validation, 2 dependency, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stage { source, .. } => source.exit_code(),
            Error::Dependency { .. } => 2,
            Error::Divergence { .. }
            | Error::DegenerateLabels { .. }
            | Error::UndefinedAuc
            | Error::UndefinedDirection => 3,
            _ => 1,
        }
    }
}
