use std::path::PathBuf;
use std::process::ExitCode;

use avmae_cli::{cmd_eval, cmd_finetune, cmd_pretrain, cmd_probe, cmd_reconstruct, cmd_sweep, exit_code, Invocation};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "avmae",
    version,
    about = "Audiovisual masked autoencoder pretraining and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (`key=value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for checkpoints, history and images.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides `train.seed` and `AVMAE_SEED`.
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluation views; overrides `eval.views`.
    #[arg(long)]
    views: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Masked-autoencoder pretraining.
    Pretrain(Common),
    /// Supervised finetuning from a pretraining checkpoint.
    Finetune(Common),
    /// Linear probe on frozen encoder features.
    Probe(Common),
    /// Multi-view evaluation of a classifier checkpoint.
    Eval(Common),
    /// Writes original / masked / reconstructed image grids.
    Reconstruct(Common),
    /// Pretrains and probes every point of an ablation grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `fusion` or `masking`.
        #[arg(long, default_value = "fusion")]
        grid: String,
    },
}

fn invocation(c: &Common) -> Invocation {
    Invocation {
        config: c.config.clone(),
        out: c.out.clone(),
        seed: c.seed,
        views: c.views,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pretrain(c) => cmd_pretrain(&invocation(c)),
        Command::Finetune(c) => cmd_finetune(&invocation(c)),
        Command::Probe(c) => cmd_probe(&invocation(c)),
        Command::Eval(c) => cmd_eval(&invocation(c)),
        Command::Reconstruct(c) => cmd_reconstruct(&invocation(c)),
        Command::Sweep { common, grid } => cmd_sweep(&invocation(common), grid),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
