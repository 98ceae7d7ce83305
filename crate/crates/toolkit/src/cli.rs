use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "hypermod", version, about = "Class-conditional transfer of a pretrained unconditional generator")]
pub struct Cli {
    /// TOML config file; any key may be omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.steps=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Base directory for relative output paths.
    #[arg(long, global = true, env = "HYPERMOD_OUTPUT_ROOT")]
    pub output_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ToyKind {
    /// Unlabeled soft blobs.
    Source,
    /// Three classes of shapes.
    Target,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print every config key with its default value.
    Defaults,
    /// Write a synthetic dataset as an image folder.
    MakeToy {
        #[arg(long, value_enum)]
        kind: ToyKind,
        #[arg(long)]
        out: PathBuf,
        /// Images in total (source) or per class (target).
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the unconditional source model.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-align a fresh class network to a source checkpoint.
    Align {
        #[arg(long)]
        source: PathBuf,
        /// Target dataset; only its class names are used.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Conditional training from a source or aligned checkpoint, or resume a run.
    Train {
        #[arg(long, conflicts_with = "resume", required_unless_present = "resume")]
        source: Option<PathBuf>,
        /// Run directory to continue from its latest checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "resume")]
        out: Option<PathBuf>,
        /// Stop after this global step (the run can be resumed).
        #[arg(long)]
        until: Option<u64>,
    },
    /// Per-class metrics of a checkpoint against a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid of samples, one row per class.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Restrict to one class (name or index).
        #[arg(long)]
        class: Option<String>,
    },
    /// Class-space interpolation grid.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start class (name or index).
        #[arg(long)]
        from: String,
        /// End class (name or index).
        #[arg(long)]
        to: String,
        /// Columns along the class path.
        #[arg(long, default_value_t = 8)]
        steps: usize,
        /// Rows.
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Rows interpolate the noise between two latents instead of
        /// showing independent latents.
        #[arg(long)]
        noise: bool,
    },
}
