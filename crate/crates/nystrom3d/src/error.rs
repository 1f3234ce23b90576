use thiserror::Error;

/// Errors produced by the solver and its supporting machinery.
#[derive(Debug, Error)]
pub enum Error {
    /// A point lies outside the domain where an operation is defined.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid parameter value.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Kernel evaluated at coincident points.
    #[error("singularity: kernel evaluated at coincident points")]
    Singularity,

    /// A surface point does not belong to the requested chart overlap.
    #[error("point not in chart overlap: {0}")]
    NotInOverlap(String),

    /// An iterative numerical procedure failed.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Linear solver did not reach the requested residual.
    #[error("solver did not converge: residual {residual:.3e} after {iterations} iterations")]
    SolverNonConvergence {
        residual: f64,
        iterations: usize,
        history: Vec<f64>,
    },

    /// Problem size exceeds a configured cap.
    #[error("resource limit exceeded: {0}")]
    Resource(String),

    /// Reference (oracle) computation failed to converge.
    #[error("oracle error: {0}")]
    Oracle(String),

    /// Configuration file or override is invalid.
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
