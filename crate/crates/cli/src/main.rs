use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use stablab_cli::acceptance;
use stablab_cli::commands;
use stablab_cli::config::{ExperimentConfig, ExperimentKind};
use stablab_cli::output::{write_outputs, Timing};
use stablab_cli::CliError;

/// Stability experiments for GD and SGD near minima.
#[derive(Debug, Parser)]
#[command(name = "stab", version)]
struct Args {
    /// Experiment to run.
    command: ExperimentKind,
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root; results land in `<out>/<config-hash>/`.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// List acceptance criteria and exit (VerifyAll only).
    #[arg(long)]
    list: bool,
}

fn load(args: &Args) -> Result<ExperimentConfig, CliError> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            ExperimentConfig::parse(&text)?
        }
        None if args.command == ExperimentKind::VerifyAll => ExperimentConfig::default(),
        None => return Err(CliError::Config("--config is required".into())),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(args: &Args) -> Result<(), CliError> {
    if args.list {
        if args.command != ExperimentKind::VerifyAll {
            return Err(CliError::Config("--list applies to VerifyAll only".into()));
        }
        for line in acceptance::list() {
            println!("{line}");
        }
        return Ok(());
    }
    let threads = match args.threads {
        Some(0) => return Err(CliError::Config("--threads must be positive".into())),
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
            n
        }
        None => rayon::current_num_threads(),
    };
    let config = load(args)?;
    let timing = Timing::start();
    let output = commands::run(args.command, &config)?;
    if let Some(arr) = output.results.as_array().filter(|_| args.command == ExperimentKind::VerifyAll) {
        for r in arr {
            let status = if r["passed"].as_bool() == Some(true) { "PASS" } else { "FAIL" };
            println!("{status} criterion {}: {}", r["id"], r["name"].as_str().unwrap_or(""));
        }
    }
    let dir = write_outputs(&args.out, &config, &output, &timing, threads)?;
    println!("{}", dir.display());
    match output.failure {
        Some(msg) => Err(CliError::Acceptance(msg)),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
