use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use mos_core::harness::config::output_dir_from_env;
use mos_core::harness::{self, report, ExperimentConfig};
use mos_core::MosError;

/// Class-incremental learning with merged task adapters and self-refined retrieval.
#[derive(Parser)]
#[command(name = "mos", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration, writing reports and checkpoints.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the ablation ladder, oracle bound and naive baseline.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of consecutive seeds starting at the config seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Print and check the metrics of a finished run.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        problems: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(config: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig, MosError> {
    Ok(ExperimentConfig::load(config)?.with_overrides(seed, output_dir_from_env()))
}

fn execute(command: Command) -> Result<(), MosError> {
    match command {
        Command::Run { config, seed } => {
            let config = load(&config, seed)?;
            let output = harness::run_experiment(&config)?;
            report::emit_run(&config, &output, &config.output_dir)?;
            print!("{}", report::render_report(&output.runs[0].report));
            println!("wrote {}", config.output_dir.display());
        }
        Command::Ablate { config, seed, seeds } => {
            let config = load(&config, seed)?;
            if seeds == 0 {
                return Err(MosError::Config("--seeds must be at least 1".into()));
            }
            let list: Vec<u64> = (0..seeds).map(|i| config.seed.wrapping_add(i)).collect();
            let result = harness::run_ablation(&config, &list)?;
            report::emit_ablation(&result, &config.output_dir)?;
            print!("{}", report::render_ablation(&result));
            println!("wrote {}", config.output_dir.display());
        }
        Command::Report { dir } => {
            let r = report::read_report(&dir)?;
            print!("{}", report::render_report(&r));
        }
        Command::Gradcheck { problems, seed } => {
            let start = Instant::now();
            let r = harness::run_gradcheck(problems, seed)?;
            println!(
                "{} problems, {} entries checked, {} skipped at ReLU kinks, {} failures",
                r.problems, r.entries_checked, r.entries_skipped, r.failures
            );
            println!(
                "max relative error {:.3e}, max absolute error {:.3e}, {:.1}s",
                r.max_relative_error,
                r.max_abs_error,
                start.elapsed().as_secs_f64()
            );
            if !r.passed() {
                return Err(MosError::InvalidInput("gradient check failed".into()));
            }
        }
    }
    Ok(())
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
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 1 } else { 2 })
        }
    }
}
