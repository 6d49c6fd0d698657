//! Output documents: one JSON report per run plus CSV point clouds.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;

use crate::config::{OutputSpec, RunConfig, SCHEMA_VERSION};
use crate::pipeline::Command;
use crate::{CliError, EXIT_CERTIFICATION, EXIT_OK};

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    /// File stem; written as `<name>.csv`.
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub command: Command,
    pub passed: bool,
    /// First failed check, if any.
    pub failure: Option<String>,
    /// Data witnessing the first failure, if any.
    pub witness: Value,
    pub body: Value,
    pub tables: Vec<Table>,
}

impl PipelineOutput {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            EXIT_OK
        } else {
            EXIT_CERTIFICATION
        }
    }
}

#[derive(Serialize)]
struct Envelope<'a> {
    schema_version: u32,
    command: &'static str,
    timestamp: u64,
    seed: u64,
    passed: bool,
    exit_code: i32,
    failure: Option<&'a str>,
    witness: &'a Value,
    config: &'a RunConfig,
    report: &'a Value,
}

/// The echoed config leaves out the output location, which does not affect results.
fn echo(cfg: &RunConfig) -> RunConfig {
    RunConfig { output: OutputSpec::default(), ..cfg.clone() }
}

pub fn unix_timestamp() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn write_json(path: &Path, doc: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(doc).map_err(|e| CliError::Numeric(format!("serialization: {e}")))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn write_table(dir: &Path, table: &Table) -> Result<PathBuf, CliError> {
    let path = dir.join(format!("{}.csv", table.name));
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Io(e.into()))?;
    w.write_record(&table.header).map_err(|e| CliError::Io(e.into()))?;
    for row in &table.rows {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| CliError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(path)
}

/// Writes `<command>.json` and every table; returns the paths written.
pub fn write_outputs(dir: &Path, cfg: &RunConfig, out: &PipelineOutput, timestamp: u64) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.json", out.command.name()));
    write_json(
        &path,
        &Envelope {
            schema_version: SCHEMA_VERSION,
            command: out.command.name(),
            timestamp,
            seed: cfg.seed,
            passed: out.passed,
            exit_code: out.exit_code(),
            failure: out.failure.as_deref(),
            witness: &out.witness,
            config: &echo(cfg),
            report: &out.body,
        },
    )?;
    let mut written = vec![path];
    for t in &out.tables {
        written.push(write_table(dir, t)?);
    }
    Ok(written)
}

/// Writes `<command>.json` for a run that stopped with an error.
pub fn write_error(dir: &Path, cfg: &RunConfig, command: Command, err: &CliError, timestamp: u64) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.json", command.name()));
    let message = err.to_string();
    write_json(
        &path,
        &Envelope {
            schema_version: SCHEMA_VERSION,
            command: command.name(),
            timestamp,
            seed: cfg.seed,
            passed: false,
            exit_code: err.exit_code(),
            failure: Some(&message),
            witness: &err.witness(),
            config: &echo(cfg),
            report: &Value::Null,
        },
    )?;
    Ok(path)
}
