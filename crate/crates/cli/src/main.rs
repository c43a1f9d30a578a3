use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use leafaug_cli::commands;
use leafaug_cli::config::{Overrides, PipelineConfig};
use leafaug_cli::failure::{CmdResult, ExitKind};

/// Deterministic leaf-disease data pipeline.
#[derive(Parser, Debug)]
#[command(name = "leafaug", version)]
#[command(after_help = "Stages run in order: prepare, split, balance, resplit, train, eval-matrix.
Log level is read from LEAFAUG_LOG (default: warn).")]
struct Cli {
    /// Pipeline configuration file
    #[arg(long, global = true, default_value = "leafaug.toml")]
    config: PathBuf,

    /// Override the master seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Online augmentations, e.g. `rotflip+fmix` (overrides train.online_aug)
    #[arg(long, global = true)]
    aug: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Relabel, apply masks and resize the raw images
    Prepare,
    /// Assign train/dev/test splits
    Split,
    /// Top up diseased classes from the synthetic pool
    Balance,
    /// Split the augmented train+dev pool back into train and dev
    Resplit,
    /// Train the reference classifier and score it on the test split
    Train,
    /// Evaluate TRTR, TRTS, TSTR and TSTS
    EvalMatrix,
    /// Embed features in 2-D
    Tsne {
        /// Manifest to embed (default: newest stage manifest)
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Evaluate the GAN objectives on a fixture directory
    GanLoss {
        /// Directory with gan_fixture.json (default: paths.gan_fixture)
        #[arg(long)]
        fixture: Option<PathBuf>,
    },
    /// Write an augmented sample batch as PNGs
    AugmentPreview {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Batch size
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Rebuild a batch from a preview.json record
        #[arg(long)]
        replay: Option<PathBuf>,
    },
}

fn run(cli: &Cli) -> CmdResult {
    let ov = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        aug: cli.aug.clone(),
    };
    let cfg = PipelineConfig::load(&cli.config, &ov)?;
    match &cli.command {
        Command::Prepare => commands::cmd_prepare(&cfg),
        Command::Split => commands::cmd_split(&cfg),
        Command::Balance => commands::cmd_balance(&cfg),
        Command::Resplit => commands::cmd_resplit(&cfg),
        Command::Train => commands::cmd_train(&cfg),
        Command::EvalMatrix => commands::cmd_eval_matrix(&cfg),
        Command::Tsne { manifest } => commands::cmd_tsne(&cfg, manifest.as_deref()),
        Command::GanLoss { fixture } => commands::cmd_gan_loss(&cfg, fixture.as_deref()),
        Command::AugmentPreview {
            manifest,
            count,
            replay,
        } => commands::cmd_augment_preview(&cfg, manifest.as_deref(), *count, replay.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LEAFAUG_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { ExitKind::Config as u8 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code() as u8)
        }
    }
}
