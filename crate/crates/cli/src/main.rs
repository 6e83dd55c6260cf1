mod args;
mod commands;
mod config;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::Env;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.global.quiet, cli.global.verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .init();

    let result = Env::new(&cli.global).and_then(|env| match &cli.command {
        Command::Ingest(a) => commands::ingest(&env, a),
        Command::Extract(a) => commands::extract(&env, a),
        Command::BuildPrior(a) => commands::build_prior_cmd(&env, a),
        Command::BuildDataset(a) => commands::build_dataset(&env, a),
        Command::Evaluate(a) => commands::evaluate(&env, a),
        Command::VerifyBound(a) => commands::verify_bound_cmd(&env, a),
        Command::Report(a) => commands::report(&env, a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            log::error!("{:#}", f.error());
            ExitCode::from(f.code() as u8)
        }
    }
}
