use std::process::ExitCode;

use clap::{CommandFactory, Parser};
use vhp_cli::args::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(message) = cli.command.validate() {
        Cli::command()
            .error(clap::error::ErrorKind::ArgumentConflict, message)
            .exit();
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match vhp_cli::run(&cli, &mut out) {
        Ok(dir) => {
            eprintln!("{} run written to {}", cli.command.name(), dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
