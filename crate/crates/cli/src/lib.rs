//! Command-line driver: `prepare`, `train`, `evaluate`, `predict`, `diagnose`.

pub mod args;
pub mod commands;
pub mod io;
pub mod manifest;

use std::io::Write;
use std::path::PathBuf;

use args::{Cli, Command};

/// Runs a parsed command line, writing human-readable results to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> anyhow::Result<PathBuf> {
    let data_dir = &cli.data_dir;
    match &cli.command {
        Command::Prepare(a) => commands::prepare(data_dir, a, out),
        Command::Train(a) => commands::train(data_dir, a, out),
        Command::Evaluate(a) => commands::evaluate(data_dir, a, out),
        Command::Predict(a) => commands::predict_cmd(data_dir, a, out),
        Command::Diagnose(a) => commands::diagnose(data_dir, a, out),
    }
}
