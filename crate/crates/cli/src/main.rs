use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    tanreg_cli::run(tanreg_cli::Cli::parse())
}
