mod args;
mod commands;

use std::fmt;
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

/// Bad flags, config or arguments.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// An error that carries its own exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn numerical(msg: &str) -> Self {
        Self {
            code: EXIT_NUMERICAL,
            message: msg.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return EXIT_USAGE;
        }
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.code;
        }
        if let Some(e) = cause.downcast_ref::<phgr::Error>() {
            return match e {
                phgr::Error::Numerical(_) => EXIT_NUMERICAL,
                phgr::Error::Data(_) | phgr::Error::Parse { .. } | phgr::Error::Lookup(_) | phgr::Error::Io { .. } => {
                    EXIT_DATA
                }
                _ => EXIT_USAGE,
            };
        }
        if cause.is::<std::io::Error>() {
            return EXIT_DATA;
        }
    }
    EXIT_USAGE
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let threads = commands::load_config(cli.command.common())?.threads;
    if threads > 0 {
        // Only fails if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    match &cli.command {
        Command::Prepare(a) => commands::prepare(a),
        Command::Train(a) => commands::train(&a.common),
        Command::Evaluate(a) => commands::evaluate_cmd(a),
        Command::Ablate(a) => commands::ablate(&a.common),
        Command::VerifyGeometry(a) => commands::verify(a),
        Command::AnalyzeRegions(a) => commands::analyze_regions(a),
        Command::ExportAttention(a) => commands::export_attention(a),
        Command::Grid(a) => commands::grid(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
