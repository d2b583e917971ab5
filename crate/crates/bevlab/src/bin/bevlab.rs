use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bevlab::harness::commands;
use bevlab::harness::ExperimentConfig;

#[derive(Parser)]
#[command(name = "bevlab", about = "BEV semantic mapping lab: train, sweep, and cost-account a restoration-last pipeline", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Experiment config (JSON); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the dataset seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for checkpoints, CSVs, and rasters.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the scene corpus and its ground-truth rasters.
    GenScenes,
    /// Two-stage training run plus evaluation.
    Train,
    /// Evaluate the saved checkpoint on the validation split.
    Eval,
    /// Stage-B comparison across upsampling methods (shared stage A).
    CompareUpsamplers,
    /// End-to-end training across restoration factors.
    SweepScale,
    /// Attention-depth memory sweep, analytic and measured.
    SweepMsa,
    /// Analytic parameter/activation/flop table.
    CostReport,
    /// Ground truth vs prediction side-by-side render.
    Render,
}

fn run(cli: Cli) -> bevlab::Result<String> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.dataset.seed = seed;
    }
    std::fs::create_dir_all(&cli.out_dir)?;
    match cli.cmd {
        Cmd::GenScenes => commands::cmd_gen_scenes(&cfg, &cli.out_dir),
        Cmd::Train => commands::cmd_train(&cfg, &cli.out_dir),
        Cmd::Eval => commands::cmd_eval(&cfg, &cli.out_dir),
        Cmd::CompareUpsamplers => commands::cmd_compare_upsamplers(&cfg, &cli.out_dir),
        Cmd::SweepScale => commands::cmd_sweep_scale(&cfg, &cli.out_dir),
        Cmd::SweepMsa => commands::cmd_sweep_msa(&cfg, &cli.out_dir),
        Cmd::CostReport => commands::cmd_cost_report(&cfg, &cli.out_dir),
        Cmd::Render => commands::cmd_render(&cfg, &cli.out_dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::FAILURE
        }
    }
}
