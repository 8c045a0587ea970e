use std::process::ExitCode;

use clap::Parser;
use ruled_decoup_cli::{configure_threads, run, CliError, RunConfig};

fn fail(err: &CliError) -> ExitCode {
    let record = serde_json::json!({ "status": "error", "exit_code": err.exit_code(), "error": err });
    eprintln!("{record}");
    ExitCode::from(err.exit_code() as u8)
}

fn main() -> ExitCode {
    let config = match RunConfig::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    if let Err(e) = configure_threads() {
        return fail(&e);
    }
    match run(&config) {
        Ok(outcome) => {
            println!("{}", serde_json::json!({ "status": "ok", "artifacts": outcome.artifacts, "hash": outcome.hash }));
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}
