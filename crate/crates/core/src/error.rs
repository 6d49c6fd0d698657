use thiserror::Error;

/// Errors raised by the numeric core.
///
/// Witness points are carried as `f64` vectors so the error type stays
/// independent of the scalar the computation ran in.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is singular ({0})")]
    SingularMatrix(&'static str),

    #[error("matrix is not symmetric (asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("{what} is not 1-periodic: deviation {deviation:e} at {at:?}")]
    NonPeriodic { what: &'static str, deviation: f64, at: Vec<f64> },

    #[error("convexity violated at q={q:?}, Q={big_q:?}: <-d12 S v, v> = {margin:e} for v={v:?}")]
    ConvexityViolation { q: Vec<f64>, big_q: Vec<f64>, v: Vec<f64>, margin: f64 },

    #[error("bound violated: {what} (slack {slack:e}) at {at:?}")]
    BoundViolation { what: String, slack: f64, at: Vec<f64> },

    #[error("Newton solve did not converge after {iterations} iterations (residual {residual:e})")]
    NewtonDivergence { iterations: usize, residual: f64 },

    #[error("boundary-value shooting did not converge (residual {residual:e}) for q={q:?}, Q={big_q:?}")]
    ShootingDivergence { q: Vec<f64>, big_q: Vec<f64>, residual: f64 },

    #[error("configuration is not critical: residual {residual:e} exceeds {tol:e}")]
    NotCritical { residual: f64, tol: f64 },

    #[error("iteration cap of {cap} exceeded (gradient norm {residual:e})")]
    IterationCapExceeded { cap: usize, residual: f64 },

    #[error("orbit class (m={m:?}, d={d}) is not prime")]
    NonPrimeClass { m: Vec<i64>, d: u32 },

    #[error("twist block not positive: smallest eigenvalue {eig_min:e} at epsilon={epsilon}")]
    PositivityFailure { epsilon: f64, eig_min: f64 },

    #[error("Hamiltonian is not optical on the sampled window: {0}")]
    NotOptical(String),

    #[error("the map chain is empty")]
    EmptyChain,

    #[error("step {step}: {source}")]
    InStep { step: usize, source: Box<Error> },

    #[error("parameter {what}={value} outside [{lo}, {hi}]")]
    OutOfRange { what: &'static str, value: f64, lo: f64, hi: f64 },
}

impl Error {
    /// Attaches the index of the step that failed.
    pub fn in_step(self, step: usize) -> Self {
        Error::InStep { step, source: Box::new(self) }
    }

    /// The error with any step context removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::InStep { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
