mod args;
mod commands;
mod report;

use std::process::ExitCode;

use clap::Parser;

use args::Cli;
use commands::{execute, Source};

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    // Everything after the subcommand name, as typed.
    let args = raw
        .iter()
        .position(|a| a == cli.command.name())
        .map(|i| raw[i + 1..].to_vec())
        .unwrap_or_default();
    let args = args.into_iter().filter(|a| !is_verbosity(a)).collect();
    match execute(&cli.command, Source::Layered(&Default::default()), args) {
        Ok(_) => ExitCode::SUCCESS,
        // A closed pipe (`map-stats | head`) is not a failure.
        Err(e) if closed_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            let r = report::report(&e);
            if cli.json_errors {
                eprintln!("{}", serde_json::to_string(&r).unwrap_or_else(|_| r.message.clone()));
            } else {
                eprint!("{r}");
            }
            ExitCode::from(r.exit_code as u8)
        }
    }
}

/// Flags that only affect logging or error output, left out of run manifests.
fn is_verbosity(a: &str) -> bool {
    a == "--verbose" || a == "--json-errors" || (a.starts_with('-') && !a.starts_with("--") && a.len() > 1 && a[1..].chars().all(|c| c == 'v'))
}

fn closed_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .any(|c| c.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe))
}
