mod args;
mod commands;
mod run_dir;

use std::fmt;
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// A mistake in how the tool was invoked (missing input, clashing output).
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Exit code 1 for bad input, 2 for failures during computation.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<relu_fields::Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Usage("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.command {
        Command::FitImage(a) => commands::fit_image(a, cli.threads)?,
        Command::FitOccupancy(a) => commands::fit_occupancy(a, cli.threads)?,
        Command::FitRadiance(a) => commands::fit_radiance(a, cli.threads)?,
        Command::Render(a) => commands::render(a)?,
        Command::Eval(a) => commands::eval(a)?,
        Command::Selfcheck(a) => return Ok(commands::selfcheck(a)),
        Command::MakeScene(a) => commands::make_scene(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
