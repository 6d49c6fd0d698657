use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use symtwist_cli::report::{unix_timestamp, write_error};
use symtwist_cli::{run, write_outputs, CliError, Command, RunConfig, EXIT_CONFIG};

const GRAMMAR: &str = "\
Hamiltonian expressions (system.hamiltonian with model \"expression\"):
  expr    := term (('+' | '-') term)*
  term    := unary (('*' | '/') unary)*
  unary   := '-' unary | power
  power   := primary ('^' unary)?      exponent must be constant; right-associative
  primary := number | pi | t | q1..qn | p1..pn | sin|cos|exp|sqrt '(' expr ')' | '(' expr ')'

Exit codes: 0 success, 1 usage or config error, 2 certification or verification failure,
3 numeric failure.";

#[derive(Parser)]
#[command(name = "symtwist", version, about = "Periodic orbits of symplectic twist maps", after_long_help = GRAMMAR)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides output.dir of the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Tolerance override, e.g. --tol orbit=1e-9 (repeatable).
    #[arg(long = "tol", global = true, value_name = "KEY=VALUE")]
    tol: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Periodicity, derivative, convexity, lower-bound and symplecticity checks.
    Check,
    /// Periodic orbit search for every requested class.
    Orbits,
    /// Split a Hamiltonian time-1 map into twist maps and search the chain.
    Decompose,
    /// Realize a twist map as the time-1 map of a Hamiltonian flow.
    Suspend,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Check => Command::Check,
            Cmd::Orbits => Command::Orbits,
            Cmd::Decompose => Command::Decompose,
            Cmd::Suspend => Command::Suspend,
        }
    }
}

fn prepare(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::Config("--config PATH is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    for t in &cli.tol {
        cfg.tolerances.set(t)?;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = Some(out.clone());
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot set thread count: {e}")))?;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { 0 });
        }
    };
    let command = Command::from(cli.command);
    let cfg = match prepare(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("symtwist: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let out_dir = cfg.output.dir.clone().unwrap_or_else(|| PathBuf::from("."));
    let timestamp = unix_timestamp();
    match run(command, &cfg).and_then(|out| write_outputs(&out_dir, &cfg, &out, timestamp).map(|paths| (out, paths))) {
        Ok((out, paths)) => {
            for p in &paths {
                println!("{}", p.display());
            }
            if let Some(f) = &out.failure {
                eprintln!("symtwist {}: {f}", command.name());
            }
            ExitCode::from(out.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("symtwist {}: {e}", command.name());
            if let Err(w) = write_error(&out_dir, &cfg, command, &e, timestamp) {
                eprintln!("symtwist: could not write error report: {w}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
