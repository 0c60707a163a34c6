mod args;
mod commands;
mod config;
mod error;
mod manifest;

use clap::Parser;

use crate::args::Cli;
use crate::error::CliResult;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv: Vec<String> = std::env::args().collect();
    if let Err(e) = real_main(&argv) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn real_main(argv: &[String]) -> CliResult<()> {
    let merged = config::merge_config(argv)?;
    let cli = match Cli::try_parse_from(&merged) {
        Ok(cli) => cli,
        // help and version exit 0, parse errors 2
        Err(e) => e.exit(),
    };
    commands::run(cli, &merged[1..])
}
