mod args;
mod commands;
mod config;
mod error;
mod manifest;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command, StudyCommand};
use error::CliError;

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("MRECG_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("MRECG_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Plan(a) => commands::plan(&a),
        Command::Quantize(a) => commands::quantize(&a),
        Command::Study(StudyCommand::Batch(a)) => commands::study_batch(&a),
        Command::Study(StudyCommand::Schemes(a)) => commands::study_schemes(&a),
        Command::Study(StudyCommand::Oscillation(a)) => commands::study_oscillation(&a),
    }
}

fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv = match config::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {}", e.one_line());
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                print!("{e}");
                return 0;
            }
            _ => {
                let text = e.to_string();
                let first = text.lines().next().unwrap_or("invalid arguments");
                eprintln!("error: {}", first.trim_start_matches("error: "));
                return 2;
            }
        },
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.one_line());
            e.exit_code()
        }
    }
}

fn main() {
    std::process::exit(run());
}
