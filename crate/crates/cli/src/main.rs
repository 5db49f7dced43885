use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nlup_core::pipeline::{Pipeline, PipelineConfig, Stage};

#[derive(Parser, Debug)]
#[command(name = "nlup", version, about = "Fine/coarse flow simulation with learned coarse transmissibilities")]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for independent runs.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Fine snapshot and test runs, reduced to coarse averages and extracted transmissibilities.
    SimulateFine,
    /// Classic coarse transmissibilities from local cell problems.
    Upscale,
    /// Supervised samples from the snapshot runs.
    BuildDataset,
    /// One surrogate per connection kind.
    Train,
    /// Classic and surrogate coarse solves of the test runs.
    SolveCoarse,
    /// Error CSVs and summary table.
    Report,
    /// Every stage in order.
    All,
}

fn run(cli: &Cli) -> nlup_core::Result<()> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| nlup_core::Error::Config("--config is required".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output = o.clone();
    }
    let p = Pipeline::new(cfg, cli.threads)?;
    log::info!("config {} (sha256 {})", path.display(), p.config_hash());
    let stage = match cli.command {
        Command::SimulateFine => Stage::SimulateFine,
        Command::Upscale => Stage::Upscale,
        Command::BuildDataset => Stage::BuildDataset,
        Command::Train => Stage::Train,
        Command::SolveCoarse => Stage::SolveCoarse,
        Command::Report => {
            print!("{}", p.report()?.table());
            return Ok(());
        }
        Command::All => {
            print!("{}", p.run_all()?.table());
            return Ok(());
        }
    };
    p.run(stage)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
