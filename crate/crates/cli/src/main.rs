mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use commands::{Cli, UsageError};

/// Machine-readable failure line: `{"error":"<kind>","message":"..."}`.
fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    if err.downcast_ref::<UsageError>().is_some() {
        return ("usage", 2);
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<tinydt::Error>() {
            let kind = match e {
                tinydt::Error::Config(_) => "config",
                tinydt::Error::Data(_) | tinydt::Error::Episode { .. } => "data",
                tinydt::Error::Parse { .. } => "parse",
                tinydt::Error::Format(_) | tinydt::Error::Truncated(_) => "format",
                tinydt::Error::Io(_) => "io",
                tinydt::Error::Json(_) => "json",
                tinydt::Error::NonFiniteLoss { .. } | tinydt::Error::NonFiniteGradient { .. } => "diverged",
                _ => "internal",
            };
            return (kind, 1);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ("io", 1);
        }
    }
    ("internal", 1)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let message = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with("For more information"))
                .map(|l| l.trim_start_matches("error: "))
                .collect::<Vec<_>>()
                .join(" ");
            eprintln!("{}", error_line("usage", &message));
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (kind, code) = classify(&err);
            let message = format!("{err:#}").replace('\n', " ");
            eprintln!("{}", error_line(kind, &message));
            ExitCode::from(code)
        }
    }
}
