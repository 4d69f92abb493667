use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong inside the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("corpus is empty: no tokens survive the frequency threshold")]
    EmptyCorpus,
    #[error("need {needed} documents but only {available} are available")]
    InsufficientDocuments { needed: usize, available: usize },
    #[error("sequence is empty")]
    EmptySequence,
    #[error("sequence of length {len} is too short to score (need at least {min})")]
    SequenceTooShort { len: usize, min: usize },
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("token id {id} is outside the vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("operation requires scheme {expected}, got {actual}")]
    SchemeMismatch {
        expected: &'static str,
        actual: &'static str,
    },
    #[error("statistic is undefined: {0}")]
    UndefinedStatistic(&'static str),
    #[error("sample set is empty: {0}")]
    EmptySample(&'static str),
    #[error("target TPR {target:.3} is unachievable: TPR at delta_max={delta_max} is {achieved:.3}")]
    UnachievableTarget {
        target: f64,
        achieved: f64,
        delta_max: f64,
    },
    #[error("no gamma in the grid could be calibrated")]
    NoFeasibleGamma,
    #[error("expected a {expected} task example, got {actual}")]
    CategoryMismatch {
        expected: &'static str,
        actual: &'static str,
    },
    #[error("task mixes categories {0} and {1}")]
    MixedCategories(&'static str, &'static str),
    #[error("normalized score undefined: unwatermarked score equals the random baseline ({0})")]
    DegenerateBaseline(f64),
    #[error("label analysis requires a CLS task")]
    NotCls,
    #[error("label {0:?} spans more than one token")]
    MultiTokenLabel(String),
    #[error("{0} labels is more than the 20 supported by exhaustive enumeration")]
    TooManyLabels(usize),
    #[error("outcomes cover {got} of {expected} label assignments")]
    IncompleteEnumeration { got: usize, expected: usize },
    #[error("k={k} exceeds the {choices} choices of example {example}")]
    KTooLarge {
        k: usize,
        choices: usize,
        example: usize,
    },
    #[error("invalid count: {0}")]
    InvalidCount(String),
    #[error("remote vocabulary hash {remote} does not match local {local}")]
    VocabularyMismatch { local: String, remote: String },
    #[error("endpoint {endpoint} unavailable after {attempts} attempts: {reason}")]
    EndpointUnavailable {
        endpoint: String,
        attempts: usize,
        reason: String,
    },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("run directory {0} contains no evaluation reports")]
    EmptyRunDir(PathBuf),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
