use std::fmt;

/// Errors from the numeric core and the filter recursions.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Input matrix is not symmetric within tolerance.
    NotSymmetric,
    /// Matrix is indefinite beyond the jitter budget (Cholesky failed).
    NotPositiveSemidefinite,
    /// Eigenvalue iteration exceeded its sweep cap.
    DidNotConverge,
    /// A map produced NaN or infinity where finite output was required.
    NonFiniteOutput,
    /// A point rule would require more points than the configured budget.
    PointBudgetExceeded { requested: usize, budget: usize },
    /// Unscented rule with `n + kappa <= 0` has no real point spread.
    DegenerateSpread,
    /// A simulated or estimated state left the finite range.
    NonFiniteState,
    /// Innovation covariance is singular; no gain can be computed.
    SingularInnovation,
    /// Process-noise covariance is singular and could not be worked around.
    SingularQ,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::NotSymmetric => write!(f, "matrix is not symmetric"),
            Error::NotPositiveSemidefinite => {
                write!(
                    f,
                    "matrix is not positive semidefinite (jitter budget exhausted)"
                )
            }
            Error::DidNotConverge => write!(f, "eigenvalue iteration did not converge"),
            Error::NonFiniteOutput => write!(f, "map produced a non-finite output"),
            Error::PointBudgetExceeded { requested, budget } => {
                write!(f, "rule needs {requested} points, budget is {budget}")
            }
            Error::DegenerateSpread => write!(f, "unscented spread n + kappa must be positive"),
            Error::NonFiniteState => write!(f, "state became non-finite"),
            Error::SingularInnovation => write!(f, "innovation covariance is singular"),
            Error::SingularQ => write!(f, "process-noise covariance is singular"),
        }
    }
}

impl std::error::Error for Error {}

pub type Result<T> = std::result::Result<T, Error>;
