use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("inadmissible kernel: {0}")]
    InadmissibleKernel(String),
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("singular operator: {0}")]
    SingularOperator(String),
    #[error("unsupported signal: {0}")]
    UnsupportedSignal(String),
    #[error("self-adjointness violated: {0}")]
    NotSelfAdjoint(String),
    #[error("mean consistency violated: gap {0:.3e}")]
    ConsistencyViolation(f64),
    #[error("convexity violated: {0}")]
    ConvexityViolation(String),
    #[error("scenario tree too large: {0}")]
    SizeExceeded(String),
    #[error("singular KKT system: {0}")]
    SingularSystem(String),
    #[error("objective not concave: {0}")]
    NonConcave(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, Error>;
