//! `backpack` command-line driver.

mod commands;
mod config;

use std::io::Write as _;
use std::path::Path;
use std::process::ExitCode;

use config::{parse_config, Parsed, UsageError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(#[from] UsageError),
    #[error(transparent)]
    Core(#[from] backpack::Error),
}

impl CliError {
    fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Core(backpack::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    /// 1 for usage mistakes, 2 for bad data or files, 3 for numerical failures.
    fn exit_code(&self) -> u8 {
        use backpack::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e {
                E::InvalidArgument(_) | E::OutOfRange { .. } => 1,
                E::Numeric(_) | E::NonFinite { .. } => 3,
                _ => 2,
            },
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let argv: Vec<String> = std::env::args().collect();
    let result = match parse_config(&argv) {
        Ok(Parsed::Info(text)) => {
            print!("{text}");
            let _ = std::io::stdout().flush();
            return ExitCode::SUCCESS;
        }
        Ok(Parsed::Run(cfg)) => commands::dispatch(&cfg),
        Err(e) => Err(CliError::Usage(e)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
