//! Command-line driver: data generation, training, evaluation, layer
//! selection, cost planning and analysis artifacts.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Ctx;

#[derive(Parser, Debug)]
#[command(name = "deepinsert", version, about = "Late multimodal insertion experiments on grid-QA")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override any config field, e.g. `--set model.insert_layer=2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory (overrides the config and the DEEPINSERT_OUT_DIR variable).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate and persist train/val/test splits.
    GenData,
    /// Train at the configured insertion layer.
    Train,
    /// Evaluate a checkpoint on the configured split.
    Eval,
    /// Evaluate baseline weights at each candidate insertion layer.
    Sweep,
    /// Train the REINFORCE layer policy against a frozen checkpoint.
    RlSelect,
    /// Analytical FLOPs with instrumented reconciliation.
    Flops,
    /// Attention traces, VAR and token-contribution maps.
    AnalyzeAttn,
    /// Mutual k-NN alignment grid between two models' layers.
    Align,
    /// Accuracy-vs-cost table and chart across insertion layers.
    Tradeoff,
    /// Greedy generation for one sample.
    Generate,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Sweep => "sweep",
            Command::RlSelect => "rl-select",
            Command::Flops => "flops",
            Command::AnalyzeAttn => "analyze-attn",
            Command::Align => "align",
            Command::Tradeoff => "tradeoff",
            Command::Generate => "generate",
        }
    }
}

fn run(cli: &Cli, ctx: Ctx) -> anyhow::Result<()> {
    let report = match cli.command {
        Command::GenData => commands::gen_data(&ctx),
        Command::Train => commands::train_cmd(&ctx),
        Command::Eval => commands::eval_cmd(&ctx),
        Command::Sweep => commands::sweep_cmd(&ctx),
        Command::RlSelect => commands::rl_select(&ctx),
        Command::Flops => commands::flops_cmd(&ctx),
        Command::AnalyzeAttn => commands::analyze_attn(&ctx),
        Command::Align => commands::align_cmd(&ctx),
        Command::Tradeoff => commands::tradeoff_cmd(&ctx),
        Command::Generate => commands::generate_cmd(&ctx),
    }?;
    let path = report.write_named(&ctx.out)?;
    println!("{}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match config::resolve(cli.config.as_deref(), &cli.set, cli.out_dir.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let result = Ctx::new(cfg, cli.command.name()).and_then(|ctx| run(&cli, ctx));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
