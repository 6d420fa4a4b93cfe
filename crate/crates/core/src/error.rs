use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{name} not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { name: &'static str, asymmetry: f64 },

    #[error("{name} not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd {
        name: &'static str,
        min_eigenvalue: f64,
    },

    #[error("discount factor must lie in (0, 1), got {0}")]
    Discount(f64),

    #[error("unstable policy: spectral radius {radius}")]
    UnstablePolicy { radius: f64 },

    #[error("initial policy unstable: spectral radius {radius}")]
    InitialUnstable { radius: f64 },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("fixed point diverged at iteration {iteration}: residual {residual:e}, minimum {minimum:e}")]
    Diverged {
        iteration: usize,
        residual: f64,
        minimum: f64,
    },

    #[error("fixed point is not a stable policy: spectral radius {radius}")]
    UnstableFixedPoint { radius: f64 },

    #[error("singular F: cond(F_n) = {cond_f:e}, cond(F̄_n) = {cond_f_bar:e}")]
    SingularGain { cond_f: f64, cond_f_bar: f64 },

    #[error("singular covariance: sigma_min = {0:e}")]
    SingularCovariance(f64),

    #[error("operation requires a finite population")]
    InfinitePopulation,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("empty trace set")]
    EmptyTraces,

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
