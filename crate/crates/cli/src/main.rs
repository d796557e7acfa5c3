use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    osls_cli::run(osls_cli::Cli::parse())
}
