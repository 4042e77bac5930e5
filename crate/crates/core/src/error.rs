use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("matrix is not symplectic: defect {defect:.3e} exceeds {tol:.3e}")]
    NotSymplectic { defect: f64, tol: f64 },

    #[error("reprojection failed after {iterations} iterations (defect {defect:.3e})")]
    ProjectionFailure { iterations: usize, defect: f64 },

    #[error("invalid system: {0}")]
    InvalidSystem(String),

    #[error("invalid control: {0}")]
    InvalidControl(String),

    #[error("trajectory blew up at t = {time}: defect {defect:.3e}")]
    BlowUp { time: f64, defect: f64 },

    #[error("grid mismatch: {0}")]
    Grid(String),

    #[error("bracket depth {depth} needs derivative of order {order} of A(t), which the system does not supply")]
    InsufficientDerivatives { depth: usize, order: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("control basis is degenerate: {0}")]
    BasisDegenerate(String),

    #[error("target is off the symplectic group: defect {defect:.3e}")]
    InvalidTarget { defect: f64 },

    #[error("Newton steering did not converge in {iterations} iterations (best residual {best_residual:.3e})")]
    NoConvergence { iterations: usize, best_residual: f64 },

    #[error("invalid curvature path: {0}")]
    InvalidCurvature(String),

    #[error("distinct-eigenvalue condition fails: best gap {gap:.3e} at t = {time}")]
    ContrerasFailed { gap: f64, time: f64 },

    #[error("avoided intervals destroy surjectivity: {0}")]
    AvoidanceInfeasible(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
