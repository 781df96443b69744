//! Command-line driver: dataset generation, baseline design, training,
//! evaluation and self checks.

use std::fmt;
use std::path::{Path, PathBuf};

use ambienc_core::dataset::{Profile, Split, Variant};
use anyhow::Result;
use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod plot;

pub use config::RunConfig;

/// A problem with the invocation rather than with the computation.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "ambienc", version, about = "Microphone array to Ambisonics encoding: data, baseline, network and evaluation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Workspace directory; every other path is relative to it.
    #[arg(long, global = true, default_value = ".")]
    pub root: PathBuf,
    /// Scale preset. `paper` builds and trains at full size and takes days.
    #[arg(long, global = true)]
    pub profile: Option<Profile>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file overriding profile defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the scene/array dataset into <root>/data.
    GenData {
        /// Directory of source recordings; synthetic clips when absent.
        #[arg(long)]
        sources: Option<PathBuf>,
    },
    /// Design the least-squares encoder of every array in the dataset.
    DesignBaseline {
        #[arg(long)]
        beta: Option<f64>,
        /// Restrict to arrays used by one split.
        #[arg(long)]
        split: Option<Split>,
        #[arg(long, default_value = "baseline")]
        out: PathBuf,
    },
    /// Train the network on the training split.
    Train {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Comma-separated subset of dry,wet.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<Variant>>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Evaluate the baseline and a trained network on the evaluation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
        #[arg(long)]
        split: Option<Split>,
        /// Also write SVG plots of the curves.
        #[arg(long)]
        plot: bool,
    },
    /// Compare reverse-mode gradients against finite differences.
    Gradcheck {
        /// Check a single op; all registered ops by default.
        #[arg(long)]
        op: Option<String>,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

/// Resolves `p` against the workspace root unless it is absolute.
pub fn under(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let mut cfg = RunConfig::resolve(g.config.as_deref(), g.profile, g.seed)?;
    let root = g.root.clone();
    match cli.command {
        Command::GenData { sources } => {
            if let Some(s) = sources {
                cfg.dataset.source_dir = Some(under(&root, &s));
            }
            cfg.validate()?;
            commands::gen_data(&root, &cfg)
        }
        Command::DesignBaseline { beta, split, out } => {
            if let Some(b) = beta {
                cfg.baseline.beta = b;
            }
            cfg.validate()?;
            commands::design_baseline(&root, &cfg, split, &under(&root, &out))
        }
        Command::Train {
            steps,
            batch,
            lr,
            variants,
            out,
        } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(b) = batch {
                cfg.train.batch = b;
            }
            if let Some(l) = lr {
                cfg.train.lr = l;
            }
            if let Some(v) = variants {
                cfg.train.variants = v;
            }
            cfg.validate()?;
            commands::train(&root, &cfg, &under(&root, &out))
        }
        Command::Eval {
            checkpoint,
            out,
            split,
            plot,
        } => {
            cfg.validate()?;
            commands::eval(
                &root,
                &cfg,
                &under(&root, &checkpoint),
                &under(&root, &out),
                split.unwrap_or(Split::Eval),
                plot,
            )
        }
        Command::Gradcheck { op } => commands::gradcheck(cfg.seed, op.as_deref()),
        Command::Selftest => commands::selftest(cfg.seed),
    }
}
