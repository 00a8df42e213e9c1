use std::process::ExitCode;

use clap::Parser;
use implisat::cli::{run, Cli, EXIT_INTERNAL, EXIT_USAGE};

/// Caps rayon's pool from `IMPLISAT_THREADS` (0 or unset: one per core).
fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("IMPLISAT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| format!("IMPLISAT_THREADS must be a non-negative integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| format!("cannot start thread pool: {e}"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_USAGE);
    }
    match std::panic::catch_unwind(|| run(&cli)) {
        Ok(code) => ExitCode::from(code),
        Err(_) => ExitCode::from(EXIT_INTERNAL),
    }
}
