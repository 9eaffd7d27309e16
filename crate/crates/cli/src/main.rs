mod args;
mod commands;
mod report;

use std::error::Error;
use std::process::ExitCode;

use clap::Parser;

use crate::args::{Cli, Command};

pub type CliResult<T> = Result<T, Box<dyn Error>>;

/// Exit status of a run whose checks failed.
pub const EXIT_FAIL: u8 = 1;
/// Exit status of a rejected invocation; clap uses the same code.
pub const EXIT_USAGE: u8 = 2;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ABQ_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();

    if let Some(n) = cli.global.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("thread pool already initialized: {e}");
        }
    }

    let seed = cli.global.seed();
    let run = match &cli.command {
        Command::Verify(a) => commands::verify::run(a, seed),
        Command::Bench(a) => commands::bench::run(a, seed),
        Command::Calibrate(a) => commands::calibrate::run(a, cli.global.seed),
        Command::Quantize(a) => commands::files::quantize_cmd(a, seed),
        Command::Pack(a) => commands::files::pack(a),
        Command::Inspect(a) => commands::files::inspect(a),
    };
    match run {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_FAIL)
        }
    }
}
