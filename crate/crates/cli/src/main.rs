use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use tkil::harness::{self, Ablation, ExperimentConfig, Summary};

#[derive(Parser)]
#[command(name = "tkil", version, about = "Class-incremental training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment and write its bundle.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overwrite an existing bundle in the output directory.
        #[arg(long)]
        force: bool,
    },
    /// One run per gamma value; prints the stage-by-gamma task accuracy grid.
    SweepGamma {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        gammas: Vec<f64>,
        #[arg(long)]
        force: bool,
    },
    /// Summarize a bundle directory as a table and plot.
    Report { bundle_dir: PathBuf },
    /// Component ablation: any of kd, kd+avg, full.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "kd,kd+avg,full")]
        components: Vec<Ablation>,
        #[arg(long)]
        force: bool,
    },
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::from_file(path).with_context(|| format!("reading {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run { config, force } => {
            let cfg = load(&config)?;
            let bundle = harness::run(&cfg, force)?;
            print!("{}", harness::render_table(&Summary::of(&bundle)));
            if !cfg.output_dir.as_os_str().is_empty() {
                println!("bundle written to {}", cfg.output_dir.display());
            }
        }
        Command::SweepGamma { config, gammas, force } => {
            let result = harness::gamma_sweep(&load(&config)?, &gammas, force)?;
            print!("{}", result.grid.to_tsv());
        }
        Command::Report { bundle_dir } => {
            let report = harness::report(&bundle_dir)?;
            print!("{}", report.table);
            println!("wrote report.tsv and accuracy.svg to {}", bundle_dir.display());
        }
        Command::Ablate {
            config,
            components,
            force,
        } => {
            let result = harness::ablate(&load(&config)?, &components, force)?;
            print!("{}", result.grid.to_tsv());
        }
    }
    Ok(())
}
