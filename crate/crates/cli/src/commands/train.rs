use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use c2v_core::geometry::{AuxChannels, PrimaryCondition};
use c2v_nn::train::{TrainConfig, TrainPair, Trainer};
use c2v_nn::{Checkpoint, DenoiserConfig};

use crate::dataset::{self, Case};
use crate::error::invalid;

pub const CHECKPOINT_FILE: &str = "checkpoint.c2ck";

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Dataset whose cases each have image.c2vx and either condition volumes or meshes.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory for checkpoint.c2ck and loss.csv.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Auxiliary condition channels: "none", "all", or a list of s_p,s_w,edge,ribbon.
    #[arg(long, default_value = "all")]
    pub aux: String,
    /// Bridge endpoint: cortex, pial, white, edge, ribbon or joint_distance.
    #[arg(long, default_value = "cortex")]
    pub primary: String,
    /// Total epochs (a resumed run continues until this many are complete).
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 2)]
    pub batch_size: usize,
    /// EMA decay of the inference weights.
    #[arg(long, default_value_t = 0.995)]
    pub ema: f64,
    /// Total diffusion steps.
    #[arg(long = "T", default_value_t = 1000)]
    #[serde(rename = "T")]
    pub total_steps: usize,
    /// Learning-rate cut on a training-loss plateau.
    #[arg(long, default_value_t = 0.5)]
    pub plateau_factor: f64,
    /// Epochs without relative improvement before the cut.
    #[arg(long, default_value_t = 10)]
    pub plateau_patience: usize,
    /// U-Net channels per resolution stage, comma-separated.
    #[arg(long, default_value = "16,32,48,64")]
    pub stages: String,
    #[arg(long, default_value_t = 1)]
    pub res_blocks: usize,
    /// Stage whose downsampling factor equals this gets self-attention.
    #[arg(long, default_value_t = 8)]
    pub attention_factor: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 16)]
    pub head_channels: usize,
    #[arg(long, default_value_t = 8)]
    pub groups: usize,
    /// Sinusoidal timestep feature width.
    #[arg(long, default_value_t = 64)]
    pub time_channels: usize,
    /// Continue from this checkpoint; its network and schedule settings win.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

pub fn parse_aux(s: &str) -> Result<AuxChannels> {
    s.parse()
        .map_err(|e: c2v_core::Error| invalid(format!("--aux: {e}")))
}

fn parse_stages(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| invalid(format!("--stages: bad entry {p:?}")))
        })
        .collect()
}

pub fn denoiser_config(a: &TrainArgs, resolution: usize) -> Result<DenoiserConfig> {
    let aux = parse_aux(&a.aux)?;
    let primary: PrimaryCondition = a
        .primary
        .parse()
        .map_err(|e: c2v_core::Error| invalid(format!("--primary: {e}")))?;
    let cfg = DenoiserConfig {
        in_channels: 1 + aux.count(),
        stage_channels: parse_stages(&a.stages)?,
        res_blocks: a.res_blocks,
        attention_at_factor: a.attention_factor,
        attention_heads: a.heads,
        attention_head_channels: a.head_channels,
        groups: a.groups,
        time_channels: a.time_channels,
        resolution,
        primary,
        aux,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Load every case as a (condition, image) pair on the image's grid.
pub fn load_pairs(cases: &[Case], aux: AuxChannels) -> Result<Vec<TrainPair>> {
    cases
        .par_iter()
        .map(|c| -> Result<TrainPair> {
            let image = c.image()?;
            let cond = c
                .condition(Some(*image.grid()), aux)
                .with_context(|| format!("case {}", c.label()))?;
            Ok(TrainPair { cond, image })
        })
        .collect()
}

fn write_loss_csv(path: &Path, t: &Trainer) -> Result<()> {
    let mut csv = String::from("epoch,loss,lr\n");
    for (i, (loss, lr)) in t.state.loss_curve.iter().zip(&t.state.lr_curve).enumerate() {
        let _ = writeln!(csv, "{},{loss:e},{lr:e}", i + 1);
    }
    std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))
}

pub fn run(a: &TrainArgs, seed: u64) -> Result<serde_json::Value> {
    let cases = dataset::cases(&a.dataset, |c| {
        c.has_image() && (c.has_conditions() || c.has_meshes())
    })?;
    let first = cases[0].image()?;
    let grid = *first.grid();
    let [nx, ny, nz] = grid.dims;
    if nx != ny || ny != nz {
        return Err(invalid(format!(
            "training images must be cubic, got {:?}",
            grid.dims
        )));
    }
    if let Some(c) = cases
        .iter()
        .skip(1)
        .find(|c| c.image().map(|i| *i.grid() != grid).unwrap_or(true))
    {
        return Err(invalid(format!(
            "case {} does not share the grid of {}",
            c.label(),
            cases[0].label()
        )));
    }

    let mut trainer = match &a.resume {
        Some(path) => {
            let ck =
                Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            if ck.denoiser.resolution != nx {
                return Err(invalid(format!(
                    "checkpoint resolution {} does not match dataset dims {:?}",
                    ck.denoiser.resolution, grid.dims
                )));
            }
            let mut t = ck.into_trainer()?;
            t.tcfg.epochs = a.epochs;
            t
        }
        None => {
            let tcfg = TrainConfig {
                epochs: a.epochs,
                learning_rate: a.lr,
                plateau_factor: a.plateau_factor,
                plateau_patience: a.plateau_patience,
                batch_size: a.batch_size,
                ema_rate: a.ema,
                total_steps: a.total_steps,
                seed,
                ..TrainConfig::default()
            };
            Trainer::new(denoiser_config(a, nx)?, tcfg)?
        }
    };
    let resumed_at = trainer.state.step;
    let aux = trainer.model.config().aux;
    let pairs = load_pairs(&cases, aux)?;
    log::info!(
        "training on {} cases, {} parameters, in_channels {}",
        pairs.len(),
        trainer.model.params().count(),
        trainer.model.config().in_channels
    );

    let ck_path = a.out.join(CHECKPOINT_FILE);
    let loss_path = a.out.join("loss.csv");
    let mut save_err = None;
    trainer.fit(&pairs, |t| {
        if save_err.is_none() {
            let r = Checkpoint::from_trainer(t)
                .save(&ck_path)
                .map_err(anyhow::Error::from)
                .and_then(|_| write_loss_csv(&loss_path, t));
            save_err = r.err();
        }
    })?;
    if let Some(e) = save_err {
        return Err(e.context("saving training progress"));
    }
    // a resume with nothing left to do still leaves a checkpoint behind
    if !ck_path.exists() {
        Checkpoint::from_trainer(&trainer).save(&ck_path)?;
        write_loss_csv(&loss_path, &trainer)?;
    }
    Ok(serde_json::json!({
        "denoiser": trainer.model.config(),
        "train": trainer.tcfg,
        "cases": pairs.len(),
        "parameters": trainer.model.params().count(),
        "resumed_at_step": resumed_at,
        "steps": trainer.state.step,
    }))
}
