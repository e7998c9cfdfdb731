//! `sae` — train autoencoder variants, reconstruct and embed test images,
//! build label-shuffle adversarial examples, and summarize run directories.

mod commands;
mod config;
mod datasets;
mod images;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{RawConfig, Variant};

/// Errors split by who has to act: `Usage` means the invocation or its
/// inputs were wrong (exit 2), `Internal` means the computation itself
/// failed (exit 1).
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<sae_core::data::DataError> for CliError {
    fn from(e: sae_core::data::DataError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<sae_core::nets::CheckpointError> for CliError {
    fn from(e: sae_core::nets::CheckpointError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<sae_core::tensor::TensorError> for CliError {
    fn from(e: sae_core::tensor::TensorError) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<sae_core::train::TrainError> for CliError {
    fn from(e: sae_core::train::TrainError) -> Self {
        match e {
            sae_core::train::TrainError::Config(msg) => CliError::Usage(msg),
            sae_core::train::TrainError::Tensor(t) => CliError::Internal(t.to_string()),
        }
    }
}

impl From<sae_core::eval::EvalError> for CliError {
    fn from(e: sae_core::eval::EvalError) -> Self {
        use sae_core::eval::EvalError::*;
        match e {
            WindowTooSmall { .. } | EmptyBatch => CliError::Usage(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<sae_core::attack::AttackError> for CliError {
    fn from(e: sae_core::attack::AttackError) -> Self {
        use sae_core::attack::AttackError::*;
        match e {
            InvalidArgument(_) | ClassTooSmall { .. } | SingleClass => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<sae_core::tsne::TsneError> for CliError {
    fn from(e: sae_core::tsne::TsneError) -> Self {
        CliError::Usage(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "sae",
    version,
    about = "Autoencoders with latent-space classifiers, and a label-shuffle attack on them"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model variant and save checkpoint + loss trace
    Train(TrainArgs),
    /// Reconstruct test images through a checkpoint and score PSNR/SSIM
    Reconstruct(ReconstructArgs),
    /// Encode test images and project the latents to 2-D
    Embed(EmbedArgs),
    /// Build adversarial images from a vanilla/shuffled checkpoint pair
    Attack(AttackArgs),
    /// Summarize the artifacts already in a run directory
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Named preset to start from (mnist-table2, cifar-attack, desk-scale)
    #[arg(long)]
    preset: Option<String>,

    /// File of `key = value` lines layered over the preset
    #[arg(long)]
    config: Option<PathBuf>,

    /// Single-key override, repeatable (e.g. --set batch_size=64)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Directory to write artifacts into
    #[arg(short, long)]
    out: Option<String>,

    /// RNG seed for all stochastic stages
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    /// Resolve the layered configuration; `extra` holds the values of the
    /// subcommand's dedicated flags, which take top precedence.
    fn resolve(&self, extra: &[(&str, String)]) -> Result<config::ExperimentConfig, CliError> {
        let mut flags = RawConfig::default();
        if let Some(out) = &self.out {
            flags.set("out_dir", out)?;
        }
        if let Some(seed) = self.seed {
            flags.set("seed", &seed.to_string())?;
        }
        for (key, value) in extra {
            flags.set(key, value)?;
        }
        config::resolve(
            self.preset.as_deref(),
            self.config.as_deref(),
            &self.sets,
            &flags,
        )
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Model variant: vanilla, semantic, or semantic-shuffled
    #[arg(long, value_enum)]
    variant: Option<Variant>,

    /// Number of training iterations (batches)
    #[arg(long)]
    iterations: Option<u64>,

    /// Checkpoint(s) whose decoder is shared (frozen) into this run;
    /// comma-separated when training one model per channel
    #[arg(long, value_delimiter = ',')]
    shared_checkpoint: Vec<String>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Checkpoint to evaluate; comma-separate per-channel checkpoints
    #[arg(long, value_delimiter = ',', required = true)]
    checkpoint: Vec<String>,

    /// How many test images to use (0 = all)
    #[arg(short = 'n', long)]
    count: Option<usize>,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Checkpoint to evaluate; comma-separate per-channel checkpoints
    #[arg(long, value_delimiter = ',', required = true)]
    checkpoint: Vec<String>,

    /// How many test images to embed (0 = all)
    #[arg(short = 'n', long)]
    count: Option<usize>,

    /// t-SNE perplexity
    #[arg(long)]
    perplexity: Option<f64>,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Vanilla-autoencoder checkpoint(s)
    #[arg(long, value_delimiter = ',', required = true)]
    vanilla: Vec<String>,

    /// Shuffled-label checkpoint(s) sharing the vanilla decoder
    #[arg(long, value_delimiter = ',', required = true)]
    shuffled: Vec<String>,

    /// How many test images to attack (0 = all)
    #[arg(short = 'n', long)]
    count: Option<usize>,

    /// t-SNE perplexity for the before/after maps
    #[arg(long)]
    perplexity: Option<f64>,

    /// Keep adversarial pixels unclipped instead of clamping to [0, 1]
    #[arg(long)]
    no_clamp: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory produced by another subcommand
    #[arg(long)]
    dir: String,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => {
            let mut extra: Vec<(&str, String)> = Vec::new();
            if let Some(v) = args.variant {
                extra.push(("variant", v.to_string()));
            }
            if let Some(iters) = args.iterations {
                extra.push(("iterations", iters.to_string()));
            }
            if !args.shared_checkpoint.is_empty() {
                extra.push(("shared_checkpoint", args.shared_checkpoint.join(",")));
            }
            let cfg = args.config.resolve(&extra)?;
            commands::cmd_train(&cfg)
        }
        Command::Reconstruct(args) => {
            let mut extra: Vec<(&str, String)> = Vec::new();
            if let Some(n) = args.count {
                extra.push(("sample_count", n.to_string()));
            }
            let cfg = args.config.resolve(&extra)?;
            commands::cmd_reconstruct(&args.checkpoint, &cfg)
        }
        Command::Embed(args) => {
            let mut extra: Vec<(&str, String)> = Vec::new();
            if let Some(n) = args.count {
                extra.push(("sample_count", n.to_string()));
            }
            if let Some(p) = args.perplexity {
                extra.push(("perplexity", p.to_string()));
            }
            let cfg = args.config.resolve(&extra)?;
            commands::cmd_embed(&args.checkpoint, &cfg)
        }
        Command::Attack(args) => {
            let mut extra: Vec<(&str, String)> = Vec::new();
            if let Some(n) = args.count {
                extra.push(("sample_count", n.to_string()));
            }
            if let Some(p) = args.perplexity {
                extra.push(("perplexity", p.to_string()));
            }
            if args.no_clamp {
                extra.push(("clamp", "false".to_string()));
            }
            let cfg = args.config.resolve(&extra)?;
            commands::cmd_attack(&args.vanilla, &args.shuffled, &cfg)
        }
        Command::Report(args) => commands::cmd_report(&args.dir),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
