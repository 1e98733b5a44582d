use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dglmc::cli::{cmd_bounds, cmd_compare, cmd_generate, cmd_run};
use dglmc::io::ExperimentConfig;

#[derive(Parser)]
#[command(name = "dglmc", version, about = "Distributed Gibbs sampler with local Langevin steps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic shards to the output directory.
    Generate(Common),
    /// Run the configured sampler.
    Run(Common),
    /// Tabulate the convergence and bias constants.
    Bounds(Common),
    /// Compare samplers against a MALA reference.
    Compare(Common),
}

#[derive(Args)]
struct Common {
    /// Configuration file with `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `run.seed` (and `model.data_seed` for `generate`).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run with step sizes that fail validation.
    #[arg(long)]
    override_validation: bool,
}

fn load(c: &Common, generate: bool) -> dglmc::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.run.seed = s;
        if generate {
            cfg.model.data_seed = s;
        }
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(c) => load(c, true).and_then(|cfg| cmd_generate(&cfg, &cfg.output_dir)),
        Command::Run(c) => load(c, false).and_then(|cfg| cmd_run(&cfg, &cfg.output_dir, c.override_validation).map(|_| ())),
        Command::Bounds(c) => load(c, false).and_then(|cfg| cmd_bounds(&cfg, &cfg.output_dir).map(|_| ())),
        Command::Compare(c) => load(c, false).and_then(|cfg| cmd_compare(&cfg, &cfg.output_dir, c.override_validation).map(|_| ())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
