use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("node {0} has degree 0; normalized operators are undefined")]
    IsolatedNode(usize),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("{0} did not converge within {1} iterations")]
    NoConvergence(&'static str, usize),
    #[error("edge perturbation infeasible: {0}")]
    Infeasible(String),
    #[error("requested {requested} eigenpairs but only {available} are available")]
    RankDeficient { requested: usize, available: usize },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("eigengap at the cut is zero (lambda_p == lambda_p+1); stability constant is infinite")]
    InfiniteDelta,
    #[error("matrix has repeated eigenvalues among the first {0}")]
    MultipleEigenvalues(usize),
    #[error("Davis-Kahan denominator is zero for interval [{0}, {1}]")]
    ZeroDenominator(usize, usize),
    #[error("problem too large for exhaustive search: n = {0}")]
    TooLarge(usize),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("columns are not orthonormal (max deviation {0:e})")]
    NonOrthonormal(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
