mod commands;
mod config;
mod stage;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use commands::Ctx;
use config::PipelineConfig;

/// Source cell-phone recognition pipeline.
#[derive(Parser)]
#[command(name = "sgmm", version)]
struct Cli {
    /// Flat `section.key = value` config file; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for the corpus, EM initialisation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root of the stage directories (overrides `paths.workdir`).
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Worker threads for clip-level parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesise a labelled multi-device corpus.
    Synth {
        #[arg(long)]
        devices: Option<usize>,
        #[arg(long)]
        clips: Option<usize>,
    },
    /// Extract MFCCs for every clip.
    Mfcc,
    /// Fit the universal background model on training MFCCs.
    TrainUbm,
    /// Build SGMM tensors for every clip.
    Sgmm,
    /// Train the C3D-BiLSTM on training SGMMs.
    Train,
    /// Evaluate the trained model and the MFCC-mean baseline on the test split.
    Eval,
    /// Baseline accuracy over the frame and band grid.
    Ablate,
    /// End-to-end run with a reduced training split.
    SmallSample {
        #[arg(long)]
        per_class: Option<usize>,
    },
    /// Finite-difference checks of every layer.
    Gradcheck,
    /// Print the effective config in canonical form.
    Config,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Mfcc => "mfcc",
            Command::TrainUbm => "train-ubm",
            Command::Sgmm => "sgmm",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::SmallSample { .. } => "small-sample",
            Command::Gradcheck => "gradcheck",
            Command::Config => "config",
        }
    }
}

fn effective_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if let Some(w) = &cli.workdir {
        cfg.workdir = w.clone();
    }
    match cli.command {
        Command::Synth { devices, clips } => {
            cfg.corpus.n_devices = devices.unwrap_or(cfg.corpus.n_devices);
            cfg.corpus.clips_per_device = clips.unwrap_or(cfg.corpus.clips_per_device);
        }
        Command::SmallSample { per_class: Some(n) } => cfg.small_per_class = n,
        _ => {}
    }
    cfg.validate().context("invalid config")?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global()?;
    }
    let cfg = effective_config(cli)?;
    let ctx = Ctx::new(cfg);
    match cli.command {
        Command::Synth { .. } => ctx.synth(),
        Command::Mfcc => ctx.mfcc(),
        Command::TrainUbm => ctx.train_ubm(),
        Command::Sgmm => ctx.sgmm(),
        Command::Train => ctx.train(),
        Command::Eval => ctx.eval(),
        Command::Ablate => ctx.ablate(),
        Command::SmallSample { .. } => ctx.small_sample(),
        Command::Gradcheck => ctx.gradcheck(),
        Command::Config => {
            print!("{}", ctx.cfg.to_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sgmm {}: {e:#}", cli.command.name());
            ExitCode::FAILURE
        }
    }
}
