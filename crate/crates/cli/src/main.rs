use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mmpfn_cli::{run, Command};

/// Multimodal in-context tabular classifier: pretraining, fine-tuning and
/// analysis experiments driven by JSON configs.
#[derive(Parser)]
#[command(name = "mmpfn", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Pretrain the backbone on the synthetic prior.
    Pretrain(Common),
    /// Fine-tune over seeds and conditions, then evaluate.
    Finetune(Common),
    /// Evaluate a full checkpoint without training.
    Eval(Common),
    /// Token-ratio sweep over projector variants.
    ImbalanceSweep(Common),
    /// Monte Carlo check of the attention-mass approximation.
    McAttention(Common),
    /// Cosine similarity between feature embeddings.
    Similarity(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (cmd, args) = match cli.command {
        Sub::Pretrain(a) => (Command::Pretrain, a),
        Sub::Finetune(a) => (Command::Finetune, a),
        Sub::Eval(a) => (Command::Eval, a),
        Sub::ImbalanceSweep(a) => (Command::ImbalanceSweep, a),
        Sub::McAttention(a) => (Command::McAttention, a),
        Sub::Similarity(a) => (Command::Similarity, a),
    };
    match run(cmd, &args.config, &args.out, args.jobs) {
        Ok(bundle) => {
            log::info!("wrote {}", bundle.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
