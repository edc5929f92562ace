//! `specular`: highlight detection, removal, training and evaluation.
//!
//! Exit codes: 0 ok, 2 usage, 3 I/O, 4 checkpoint or format. Every run
//! prints its resolved settings and finishes stdout with one `RESULT {...}`
//! JSON line.

mod commands;

use std::process::ExitCode;

use clap::Parser;
use serde_json::json;

use commands::{run, Cli, CliError};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            if code == 0 {
                return ExitCode::SUCCESS;
            }
            println!("RESULT {}", json!({"status": "error", "exit_code": 2, "message": "usage"}));
            return ExitCode::from(2);
        }
    };
    let command = cli.command.name();
    match run(cli) {
        Ok(mut summary) => {
            summary["command"] = json!(command);
            summary["status"] = json!("ok");
            println!("RESULT {summary}");
            ExitCode::SUCCESS
        }
        Err(CliError { code, message }) => {
            eprintln!("error: {message}");
            println!(
                "RESULT {}",
                json!({"command": command, "status": "error", "exit_code": code, "message": message})
            );
            ExitCode::from(code)
        }
    }
}
