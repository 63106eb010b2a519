//! The `c2v` pipeline: phantom datasets, condition volumes, the PCA shape
//! model, denoiser training, synthesis, atrophy simulation and evaluation.
//!
//! Every command writes `run_config.json` into its output directory. The file
//! records the global seed, the command's arguments (minus the output path) and
//! the fully resolved settings. `c2v replay` re-runs it into a new directory.

// `!(x > 0.0)` is the idiom here for rejecting NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub mod commands;
pub mod dataset;
pub mod error;

pub use commands::atrophy::AtrophyArgs;
pub use commands::eval::EvalArgs;
pub use commands::pca::{PcaFitArgs, PcaMahalanobisArgs, PcaSampleArgs};
pub use commands::phantom::PhantomArgs;
pub use commands::schedule::ScheduleDumpArgs;
pub use commands::sdf::SdfArgs;
pub use commands::synth::SynthArgs;
pub use commands::train::TrainArgs;
pub use error::{exit_code, invalid, Invalid};

pub const RUN_CONFIG: &str = "run_config.json";
pub const RUN_CONFIG_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "c2v",
    version,
    about = "Shape-conditioned synthesis of 3D volumes from cortical surface pairs"
)]
pub struct Cli {
    /// Global seed; every randomized step derives a named stream from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a dataset of synthetic surface pairs with rendered images.
    Phantom(PhantomArgs),
    /// Build signed distance, cortex, edge and ribbon volumes from surface pairs.
    Sdf(SdfArgs),
    /// Fit the PCA shape model to the ribbon samples of a dataset.
    PcaFit(PcaFitArgs),
    /// Draw new surface pairs by interpolating between random latent points.
    PcaSample(PcaSampleArgs),
    /// Mahalanobis distance of each case under a fitted shape model.
    PcaMahalanobis(PcaMahalanobisArgs),
    /// Train the bridge denoiser on a prepared dataset.
    Train(TrainArgs),
    /// Synthesize images for conditions (or surface pairs) with a trained checkpoint.
    Synth(SynthArgs),
    /// Thin the cortex of a case and optionally synthesize the atrophied image.
    Atrophy(AtrophyArgs),
    /// Score generated images against references (PSNR, SSIM, MR-SSIM, ASSD).
    Eval(EvalArgs),
    /// Write the bridge schedule and a DDIM timestep subsequence as CSV.
    ScheduleDump(ScheduleDumpArgs),
    /// Re-run a command from its run_config.json into a new output directory.
    #[serde(skip)]
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, clap::Args)]
pub struct ReplayArgs {
    /// A run_config.json written by an earlier run.
    pub config: PathBuf,
    /// Output directory for the replayed run.
    #[arg(long)]
    pub out: PathBuf,
}

/// The document written next to every run's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub command: Command,
    pub resolved: serde_json::Value,
}

impl Command {
    fn out_dir(&self) -> Option<&Path> {
        match self {
            Command::Phantom(a) => Some(&a.out),
            Command::Sdf(a) => a.out.as_deref().or(Some(&a.input)),
            Command::PcaFit(a) => Some(&a.out),
            Command::PcaSample(a) => Some(&a.out),
            Command::PcaMahalanobis(a) => Some(&a.out),
            Command::Train(a) => Some(&a.out),
            Command::Synth(a) => Some(&a.out),
            Command::Atrophy(a) => Some(&a.out),
            Command::Eval(a) => Some(&a.out),
            Command::ScheduleDump(a) => Some(&a.out),
            Command::Replay(_) => None,
        }
    }

    fn set_out(&mut self, out: PathBuf) {
        match self {
            Command::Phantom(a) => a.out = out,
            Command::Sdf(a) => a.out = Some(out),
            Command::PcaFit(a) => a.out = out,
            Command::PcaSample(a) => a.out = out,
            Command::PcaMahalanobis(a) => a.out = out,
            Command::Train(a) => a.out = out,
            Command::Synth(a) => a.out = out,
            Command::Atrophy(a) => a.out = out,
            Command::Eval(a) => a.out = out,
            Command::ScheduleDump(a) => a.out = out,
            Command::Replay(a) => a.out = out,
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Replay(r) => replay(&r),
        cmd => execute(cmd, cli.seed),
    }
}

/// Run one command and record its resolved configuration.
pub fn execute(cmd: Command, seed: u64) -> Result<()> {
    let out = cmd
        .out_dir()
        .expect("replay is dispatched separately")
        .to_path_buf();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let resolved = match &cmd {
        Command::Phantom(a) => commands::phantom::run(a, seed)?,
        Command::Sdf(a) => commands::sdf::run(a, seed)?,
        Command::PcaFit(a) => commands::pca::fit(a, seed)?,
        Command::PcaSample(a) => commands::pca::sample(a, seed)?,
        Command::PcaMahalanobis(a) => commands::pca::mahalanobis(a, seed)?,
        Command::Train(a) => commands::train::run(a, seed)?,
        Command::Synth(a) => commands::synth::run(a, seed)?,
        Command::Atrophy(a) => commands::atrophy::run(a, seed)?,
        Command::Eval(a) => commands::eval::run(a, seed)?,
        Command::ScheduleDump(a) => commands::schedule::run(a, seed)?,
        Command::Replay(_) => unreachable!(),
    };
    let record = RunConfig {
        version: RUN_CONFIG_VERSION,
        seed,
        command: cmd,
        resolved,
    };
    dataset::write_json(&out.join(RUN_CONFIG), &record)
}

pub fn read_run_config(path: &Path) -> Result<RunConfig> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .with_context(|| format!("{} is not a run configuration", path.display()))?;
    if cfg.version != RUN_CONFIG_VERSION {
        return Err(invalid(format!(
            "unsupported run configuration version {}",
            cfg.version
        )));
    }
    Ok(cfg)
}

pub fn replay(args: &ReplayArgs) -> Result<()> {
    let cfg = read_run_config(&args.config)?;
    let mut cmd = cfg.command;
    cmd.set_out(args.out.clone());
    log::info!("replaying {} with seed {}", args.config.display(), cfg.seed);
    execute(cmd, cfg.seed)
}
