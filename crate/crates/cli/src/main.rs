//! `sleepstage`: data preparation, training, evaluation and inference for
//! the three-stage sleep-stage classifier.
//!
//! Logs and results go to stdout as one JSON object per line. Failures
//! print a single JSON line to stderr and exit with 1 (bad input or
//! arguments) or 2 (internal error).

mod commands;

use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use sleepstage::Error;

use commands::Cli;

/// Errors caused by the caller (arguments, files, data) rather than by a
/// defect in the pipeline.
fn is_user_error(e: &Error) -> bool {
    !matches!(
        e,
        Error::Shape { .. }
            | Error::InvalidShape { .. }
            | Error::NonFinite { .. }
            | Error::NonScalarLoss(_)
            | Error::TapeConsumed
            | Error::NoGradients
    )
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    let line = serde_json::json!({ "error": message, "kind": kind });
    let _ = writeln!(std::io::stderr(), "{line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return fail("usage", first, 1);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .target(env_logger::Target::Stdout)
        .format(|buf, record| {
            let line = serde_json::json!({
                "event": "log",
                "level": record.level().to_string().to_lowercase(),
                "message": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_user_error(&e) => fail("user", &e.to_string(), 1),
        Err(e) => fail("internal", &e.to_string(), 2),
    }
}
