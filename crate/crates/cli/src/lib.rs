//! The `anticipate` command line: one subcommand per pipeline stage, each
//! driven by flags and an optional JSON run config.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;

use clap::Parser;

use args::{Cli, Command, PromptsCommand, SynthCommand};
pub use config::{ModelSettings, RegionMode, RunConfig, SCHEMA_VERSION};
pub use error::{CliError, CliResult, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};

pub const THREADS_ENV: &str = "ANTICIPATE_THREADS";

/// Size the global worker pool from `ANTICIPATE_THREADS`, once per process.
fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n = thread_count(&raw)?;
    // a second call in the same process finds the pool already built; keep it
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn thread_count(raw: &str) -> CliResult<usize> {
    raw.trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV}={raw:?} is not a positive integer")))
}

fn dispatch(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Prompts {
            action: PromptsCommand::Build(a),
        } => commands::prompts_build(&a),
        Command::Synth {
            action: SynthCommand::Gen(a),
        } => commands::synth_gen(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Rollout(a) => commands::rollout(&a),
        Command::Validate(a) => commands::validate(&a),
    }
}

/// Run one command line (program name first) and return the process exit code:
/// 0 on success, 1 on invalid or missing input, 2 on usage errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thread_counts() {
        assert_eq!(thread_count(" 3 ").unwrap(), 3);
        for bad in ["0", "-1", "many", ""] {
            assert!(matches!(thread_count(bad), Err(CliError::Usage(_))), "{bad}");
        }
    }
}
