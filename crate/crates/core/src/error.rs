use std::path::PathBuf;

/// Errors produced anywhere in the forensics pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed episode: {0}")]
    MalformedEpisode(String),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("probability of the target action underflowed to zero")]
    ZeroProbability,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("non-finite result in {0}")]
    NonFiniteResult(&'static str),
    #[error("invalid network spec: {0}")]
    InvalidNet(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("environment `{0}` is not supported here")]
    UnsupportedEnv(String),
    #[error("training diverged: {0}")]
    TrainingDiverged(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("empty series")]
    EmptySeries,
    #[error("invalid window [{t0}, {t1}]")]
    InvalidWindow { t0: usize, t1: usize },
    #[error("empty attribution window")]
    EmptyWindow,
    #[error("no intervention pairs to score")]
    EmptyPairSet,
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
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

    pub(crate) fn dim(what: &'static str, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch { what, expected, got }
    }
}
