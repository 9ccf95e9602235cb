use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dcmi_cli::config::{ExperimentConfig, Preset};
use dcmi_cli::runner;

#[derive(Parser)]
#[command(name = "dcmi", about = "Domain-aware contrastive knowledge transfer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment's variant x seed matrix and write reports.
    Run {
        config: PathBuf,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Parallel worker count for independent runs.
        #[arg(long)]
        workers: Option<usize>,
        /// Named (lambda1, lambda2) preset: asc, dsc, or rfd.
        #[arg(long, value_parser = parse_preset)]
        preset: Option<Preset>,
    },
    /// Run the lambda1 x lambda2 sweep grid at reduced seed count.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, value_parser = parse_preset)]
        preset: Option<Preset>,
    },
    /// Validate a config without running anything.
    Validate { config: PathBuf },
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    Preset::parse(s).ok_or_else(|| format!("unknown preset {s:?} (expected asc, dsc, or rfd)"))
}

fn load(path: &Path) -> Result<ExperimentConfig, ExitCode> {
    ExperimentConfig::from_path(path).map_err(|msg| {
        eprintln!("error: {msg}");
        ExitCode::from(2)
    })
}

fn finish(result: Result<PathBuf, runner::RunnerError>, what: &str) -> ExitCode {
    match result {
        Ok(path) => {
            println!("{what} complete; aggregate at {}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { config, out, workers, preset } => {
            let mut cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            runner::apply_overrides(&mut cfg, out, workers, preset);
            finish(runner::run(&cfg), "run")
        }
        Command::Sweep { config, out, workers, preset } => {
            let mut cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            runner::apply_overrides(&mut cfg, out, workers, preset);
            finish(runner::sweep(&cfg), "sweep")
        }
        Command::Validate { config } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let diags = runner::validate(&cfg);
            if diags.is_empty() {
                println!("ok");
                ExitCode::SUCCESS
            } else {
                for diag in diags {
                    eprintln!("invalid: {diag}");
                }
                ExitCode::from(2)
            }
        }
    }
}
