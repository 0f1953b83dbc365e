use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use mdbanet::cli::{exit_code, run, Cli, EXIT_OK, EXIT_VALIDATION};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK });
        }
    };
    let result = run(cli).context("mdbanet failed");
    match result {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<mdbanet::Error>().map_or(2, exit_code);
            ExitCode::from(code)
        }
    }
}
