use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("matrix is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("CFL violation: courant number {courant} exceeds 1")]
    CflViolation { courant: f64 },
    #[error("singular matrix: {0}")]
    SingularMatrix(String),
    #[error("ensemble needs at least 2 members, got {0}")]
    EnsembleTooSmall(usize),
    #[error("degenerate trace {0:e} in DI01 scaling")]
    DegenerateTrace(f64),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("dataset too small: {found} samples, need at least {min}")]
    DatasetTooSmall { found: usize, min: usize },
    #[error("D05 regularisation failed at iteration {iteration}: {source}")]
    RegularizationFailed {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("unrecognised file magic {found:?}, expected {expected:?}")]
    VersionMismatch { expected: String, found: String },
    #[error("zero norm for variable {0}")]
    ZeroNorm(usize),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dims(expected: usize, found: usize) -> Self {
        Error::DimensionMismatch { expected, found }
    }
}
