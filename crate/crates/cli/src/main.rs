mod args;
mod commands;
mod settings;

use std::io::{self, Write};
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use settings::{CliError, CliResult, FileConfig};

/// Optional worker-thread count for the parallel parts of encoding and loss
/// evaluation. Results do not depend on it.
const THREADS_ENV: &str = "NEAR2_THREADS";

fn init_threads() -> CliResult<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot configure {n} threads: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    let file = FileConfig::load(cli.config.as_deref())?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Train(a) => commands::train_cmd(a, &file),
        Command::Index(a) => commands::index_cmd(a, &file),
        Command::Search(a) => commands::search_cmd(a, &file, &mut out),
        Command::Eval(a) => commands::eval_cmd(a, &file, &mut out),
        Command::Ablate(a) => commands::ablate_cmd(a, &file, &mut out),
        Command::Synth(a) => commands::synth_cmd(a, &file),
        Command::Hist(a) => commands::hist_cmd(a, &file, &mut out),
    }?;
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
