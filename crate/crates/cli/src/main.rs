mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

/// Failures print as one line: `error: <category>: <message>`.
fn fail(category: &str, message: &str) -> ExitCode {
    let message = message.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error: {category}: {message}");
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = match args::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                _ => {
                    let text = e.to_string();
                    let head: Vec<&str> = text
                        .lines()
                        .take_while(|l| !l.starts_with("Usage:"))
                        .filter(|l| !l.starts_with("For more information"))
                        .collect();
                    fail("usage", head.join(" ").trim_start_matches("error: "))
                }
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let text = e.to_string();
            let prefix = format!("{}: ", e.category());
            fail(e.category(), text.strip_prefix(&prefix).unwrap_or(&text))
        }
    }
}
