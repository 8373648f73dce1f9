//! The `tapnet` command line: cross-validation, ablations, the lambda sweep,
//! single-fold training, DOT export, gradient checks and parameter audits.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

pub mod args;
pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;

use args::Command;
use commands::{execute, RunManifest};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<tapnet_core::Error> for CliError {
    fn from(e: tapnet_core::Error) -> Self {
        match e {
            tapnet_core::Error::Config { field, msg } => {
                CliError::Usage(format!("invalid value for --{}: {msg}", field.replace('_', "-")))
            }
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn dispatch(command: &Command) -> Result<i32, CliError> {
    if let Command::Rerun(a) = command {
        let manifest = RunManifest::load(&a.manifest)?;
        let mut cfg = manifest.config;
        if let Some(dir) = &a.out_dir {
            cfg.out_dir = dir.clone();
        }
        return execute(&manifest.command, &cfg);
    }
    let cfg = config::resolve(command)?;
    execute(command.name(), &cfg)
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run(argv: Vec<OsString>) -> i32 {
    let cli = match args::parse(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
