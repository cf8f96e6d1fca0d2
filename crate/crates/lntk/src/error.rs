use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("SVD failed to converge")]
    SvdFailure,
    #[error("dense Hessian side {side} exceeds guard {guard}; use the Hessian-vector product instead")]
    HessianGuard { side: usize, guard: usize },
    #[error("degenerate rank-reduction direction: all generalized eigenvalues are numerically zero")]
    DegenerateDirection,
    #[error(
        "optimality certificate violated: |tr(D)| = {trace} exceeds {tol} * ||D||_F; \
         the input is not a minimizer of the regularized risk"
    )]
    NotAMinimizer { trace: f64, tol: f64 },
    #[error("dataset file: bad magic")]
    BadMagic,
    #[error("dataset file: truncated payload (expected {expected} bytes, found {found})")]
    Truncated { expected: usize, found: usize },
    #[error("dataset file: {0}")]
    Format(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
