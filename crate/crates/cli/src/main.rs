mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;
use neuromod_core::Error;

use args::{Cli, Command};

const EXIT_VALIDATION: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_CALIBRATION: u8 = 4;

fn exit_code(e: &Error) -> u8 {
    if e.is_io() {
        EXIT_IO
    } else {
        EXIT_VALIDATION
    }
}

fn run(cli: &Cli) -> Result<commands::Outcome, Error> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Validation(format!("--threads: {e}")))?;
    }
    match &cli.command {
        Command::Stats(a) => commands::stats(a),
        Command::Score(a) => commands::score(a),
        Command::Select(a) => commands::select(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Cluster(a) => commands::cluster(a),
        Command::Overlap(a) => commands::overlap(a),
        Command::Lorenz(a) => commands::lorenz(a),
        Command::ToyTrain(a) => commands::toy_train(a),
        Command::ToyEval(a) => commands::toy_eval(a),
        Command::Report(a) => commands::report(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let argv = match config::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    log::info!("resolved config: {}", serde_json::to_string(&cli).unwrap_or_default());

    match run(&cli) {
        Ok(out) => {
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&out.summary).unwrap_or_default());
            } else if let Some(path) = out.summary.get("out").and_then(|v| v.as_str()) {
                println!("wrote {path}");
            }
            if out.calibration_failed {
                ExitCode::from(EXIT_CALIBRATION)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
