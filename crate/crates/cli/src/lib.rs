//! The `qtk` command line: argument parsing, settings, file I/O and the
//! subcommands built on `qtk-core`.

pub mod cli;
pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;

use clap::Parser;

use qtk_core::Error;

pub use cli::{Cli, Command};

/// Process exit status for a failed run.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Degenerate(_) | Error::EmptyDataset => 3,
        Error::NonFiniteLoss(_) => 1,
        Error::Shape(_)
        | Error::NonFinite { .. }
        | Error::InvalidArgument(_)
        | Error::Format(_)
        | Error::Parse(_)
        | Error::Model(_)
        | Error::StepLength { .. }
        | Error::Io { .. }
        | Error::Json { .. } => 2,
    }
}

pub fn run(cli: Cli) -> qtk_core::Result<()> {
    let go = || match &cli.command {
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Eval(a) => commands::eval(a),
        Command::Landscape(a) => commands::landscape(a),
        Command::Hessian(a) => commands::hessian(a),
        Command::SweepCalibSize(a) => commands::sweep(a),
        Command::Quantize(a) => commands::quantize(a).map(|p| eprintln!("wrote {}", p.display())),
    };
    match cli.threads {
        Some(0) => Err(Error::InvalidArgument("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot start {n} threads: {e}")))?
            .install(go),
        None => go(),
    }
}

/// Parses `args`, runs the command and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
