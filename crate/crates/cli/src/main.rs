mod args;
mod commands;
mod config_file;
mod error;
mod output;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
use error::{CliError, Result};

fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Train(c) => commands::train_cmd(c),
        Command::Verify(c) => commands::verify_cmd(c),
        Command::Cost(c) => commands::cost_cmd(c),
        Command::Heatmap(c) => commands::heatmap_cmd(c),
        Command::DecodeBench(c) => commands::decode_cmd(c),
        Command::Compare(c) => commands::compare_cmd(c),
    }
}

fn main() -> ExitCode {
    let argv = match config_file::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code());
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(CliError::Usage(String::new()).exit_code());
        }
    };
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {} failed: {e}", cli.command.name());
            ExitCode::from(e.exit_code())
        }
    }
}
