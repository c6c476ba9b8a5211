//! Experiment runner for `offload-core`: argument handling and the six
//! subcommands, each returning structured results as well as writing files.

pub mod args;
pub mod commands;
mod table;

use args::PROFILE_PATH_ENV;
pub use args::{Cli, Command, ExperimentSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config keys, missing files, or a spec that cannot run.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("cannot write {path}: {source}")]
    Output {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        EXIT_CONFIG
    }
}

impl From<offload_core::Error> for CliError {
    fn from(e: offload_core::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

/// Text for stdout plus the process exit code.
#[derive(Debug)]
pub struct Outcome {
    pub stdout: String,
    pub code: i32,
}

/// Resolves the experiment for `cli` and runs its command.
pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    let search_path = std::env::var(PROFILE_PATH_ENV).ok();
    let spec = ExperimentSpec::resolve(
        cli.command.name(),
        cli.command.args(),
        search_path.as_deref(),
    )?;
    match &cli.command {
        Command::Simulate(_) => commands::simulate(&spec).map(|r| Outcome {
            stdout: r.table,
            code: EXIT_OK,
        }),
        Command::Compare(_) => commands::compare(&spec).map(|r| Outcome {
            stdout: r.table,
            code: EXIT_OK,
        }),
        Command::Ablate(_) => commands::ablate(&spec).map(|r| Outcome {
            stdout: r.table,
            code: EXIT_OK,
        }),
        Command::ScanSeq(_) => commands::scan_seq(&spec).map(|r| Outcome {
            stdout: r.table,
            code: EXIT_OK,
        }),
        Command::MaxModel(_) => commands::max_model(&spec).map(|r| Outcome {
            stdout: r.table,
            code: EXIT_OK,
        }),
        Command::Verify(_) => commands::verify(&spec).map(|r| Outcome {
            code: if r.report.passed() {
                EXIT_OK
            } else {
                EXIT_VERIFY_FAILED
            },
            stdout: r.table,
        }),
    }
}
