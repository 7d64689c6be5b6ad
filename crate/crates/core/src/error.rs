use thiserror::Error;

/// Errors raised by the stability lab.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum StabError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("size cap exceeded: requested {requested} entries, cap is {cap}")]
    SizeCap { requested: u128, cap: u128 },

    #[error("power iteration did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("gradient at candidate minimum is not zero (norm {norm:e} > tol {tol:e})")]
    GradientNotZero { norm: f64, tol: f64 },

    #[error("Hessian is not positive definite (min eigenvalue {min_eigenvalue:e})")]
    HessianNotPD { min_eigenvalue: f64 },

    #[error("Hessian is singular")]
    SingularHessian,

    #[error("enumeration budget exceeded: {requested} paths requested, budget {budget}")]
    BudgetExceeded { requested: u128, budget: u128 },

    #[error("all-batch linear stability fails: epsilon = {epsilon} is not positive")]
    EpsilonNonPositive { epsilon: f64 },

    #[error("point is not an interpolating minimizer of the ensemble")]
    NotInterpolating,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, StabError>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(StabError::DimensionMismatch { expected, got });
    }
    Ok(())
}
