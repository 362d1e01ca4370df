use std::process::ExitCode;

use clap::Parser;
use cre_core::cli::{run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli).map_err(anyhow::Error::from) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = err.downcast_ref::<cre_core::CreError>().map_or("error", |e| e.code());
            let message = format!("{err:#}").replace('\n', " ");
            eprintln!("cre: error[{code}]: {message}");
            ExitCode::FAILURE
        }
    }
}
