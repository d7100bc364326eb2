use std::process::ExitCode;

use clap::Parser;
use fsdiff::cli::{diag, run, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            diag(serde_json::json!({"level": "error", "kind": e.kind(), "message": e.to_string(), "exit_code": e.exit_code()}));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
