//! Batch front end: configuration ingestion, the four pipelines and their
//! JSON/CSV outputs.

pub mod config;
pub mod pipeline;
pub mod report;

use serde_json::{json, Value};
use thiserror::Error;

pub use config::RunConfig;
pub use pipeline::{run, Command};
pub use report::{write_outputs, PipelineOutput, Table};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_CERTIFICATION: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("certification failed: {message}")]
    Certification { message: String, witness: Value },
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => EXIT_CONFIG,
            CliError::Certification { .. } => EXIT_CERTIFICATION,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }

    pub fn witness(&self) -> Value {
        match self {
            CliError::Certification { witness, .. } => witness.clone(),
            _ => Value::Null,
        }
    }
}

/// Witnessing data carried by a core error, if any.
pub(crate) fn core_witness(e: &symtwist::Error) -> Value {
    use symtwist::Error as E;
    match e {
        E::InStep { step, source } => json!({ "step": step, "cause": core_witness(source) }),
        E::ConvexityViolation { q, big_q, v, margin } => json!({ "q": q, "Q": big_q, "v": v, "margin": margin }),
        E::BoundViolation { what, slack, at } => json!({ "what": what, "slack": slack, "at": at }),
        E::NonPeriodic { what, deviation, at } => json!({ "what": what, "deviation": deviation, "at": at }),
        E::PositivityFailure { epsilon, eig_min } => json!({ "epsilon": epsilon, "eig_min": eig_min }),
        E::NotOptical(detail) => json!({ "detail": detail }),
        E::NotCritical { residual, tol } => json!({ "residual": residual, "tol": tol }),
        _ => Value::Null,
    }
}

impl From<symtwist::Error> for CliError {
    fn from(e: symtwist::Error) -> Self {
        use symtwist::Error as E;
        match e.root() {
            E::ConvexityViolation { .. }
            | E::BoundViolation { .. }
            | E::NonPeriodic { .. }
            | E::PositivityFailure { .. }
            | E::NotOptical(_)
            | E::NotCritical { .. } => CliError::Certification { message: e.to_string(), witness: core_witness(&e) },
            E::InvalidArgument(_)
            | E::DimensionMismatch { .. }
            | E::OutOfRange { .. }
            | E::NonPrimeClass { .. }
            | E::EmptyChain
            | E::NotSymmetric(_) => CliError::Config(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_errors_map_to_exit_codes() {
        let conv = symtwist::Error::ConvexityViolation { q: vec![0.0], big_q: vec![1.0], v: vec![1.0], margin: -1.0 };
        let e = CliError::from(conv.clone().in_step(3));
        assert_eq!(e.exit_code(), EXIT_CERTIFICATION);
        assert_eq!(e.witness()["step"], 3);
        assert_eq!(e.witness()["cause"]["margin"], -1.0);
        assert_eq!(CliError::from(symtwist::Error::NonFinite("x")).exit_code(), EXIT_NUMERIC);
        assert_eq!(CliError::from(symtwist::Error::EmptyChain).exit_code(), EXIT_CONFIG);
    }
}
