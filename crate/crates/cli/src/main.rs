//! `metavgan`: generate or validate datasets, meta-train the generator,
//! synthesize features and score zero-shot classification.
//!
//! Exit codes: 0 success, 2 configuration or data error, 3 training divergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "metavgan", version, about = "Meta-learned feature generation for few-shot zero-shot learning")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

/// Flags that override the config file.
#[derive(Debug, Args)]
struct Overrides {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    dataset_dir: Option<PathBuf>,

    /// Examples kept per seen class.
    #[arg(long, global = true, value_parser = ["5", "10", "all"])]
    shots: Option<String>,

    /// Train on query losses at the unadapted parameters.
    #[arg(long, global = true)]
    no_meta: bool,

    /// Sample query classes from the support classes.
    #[arg(long, global = true)]
    standard_split: bool,

    /// Drop the discriminator and train the conditional VAE alone.
    #[arg(long, global = true)]
    cvae_only: bool,

    /// Skip the inner adaptation of the discriminator.
    #[arg(long, global = true)]
    no_meta_disc: bool,

    #[arg(long, global = true)]
    outer_steps: Option<usize>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.dataset_dir {
            cfg.dataset_dir = dir.clone();
        }
        if let Some(shots) = &self.shots {
            cfg.shots = shots.clone();
        }
        if self.no_meta {
            cfg.meta.meta_enabled = false;
        }
        if self.standard_split {
            cfg.meta.disjoint_tasks = false;
        }
        if self.cvae_only {
            cfg.meta.cvae_only = true;
        }
        if self.no_meta_disc {
            cfg.meta.meta_on_discriminator = false;
        }
        if let Some(steps) = self.outer_steps {
            cfg.meta.outer_steps = steps;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalMode {
    Zsl,
    Gzsl,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic benchmark to the dataset directory.
    GenData(GenDataArgs),
    /// Meta-train the generator and write a checkpoint and loss trace.
    Train,
    /// Score a checkpoint on the dataset's test rows.
    Eval {
        mode: EvalMode,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write generated features for chosen classes as CSV.
    Synth {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated class ids; defaults to the unseen classes.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
        /// Rows per class.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Load the dataset directory and report its contents.
    ValidateData,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    n_seen: Option<usize>,
    #[arg(long)]
    n_unseen: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    attr_dim: Option<usize>,
    #[arg(long)]
    examples_per_class: Option<usize>,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = cli.overrides.resolve()?;
    match cli.command {
        Command::GenData(a) => {
            let d = &mut cfg.data;
            for (slot, value) in [
                (&mut d.n_seen, a.n_seen),
                (&mut d.n_unseen, a.n_unseen),
                (&mut d.feature_dim, a.feature_dim),
                (&mut d.attr_dim, a.attr_dim),
                (&mut d.examples_per_class, a.examples_per_class),
            ] {
                if let Some(v) = value {
                    *slot = v;
                }
            }
            commands::gen_data(&cfg)
        }
        Command::Train => commands::train(&cfg),
        Command::Eval { mode, checkpoint } => {
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            cfg.checkpoint = Some(cfg.checkpoint_path());
            commands::eval(&cfg, mode == EvalMode::Gzsl)
        }
        Command::Synth { checkpoint, classes, n } => {
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            cfg.checkpoint = Some(cfg.checkpoint_path());
            if !classes.is_empty() {
                cfg.synth.classes = classes;
            }
            if let Some(n) = n {
                cfg.synth.n = n;
            }
            commands::synth(&cfg)
        }
        Command::ValidateData => commands::validate_data(&cfg),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<metavgan::Error>() {
        Some(metavgan::Error::Divergence { .. }) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
