use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use c2v_core::diffusion::{sample, BridgeSchedule, SamplerConfig};
use c2v_core::{ConditionSet, Grid, Volume};
use c2v_nn::{Checkpoint, Model, NetDenoiser};

use crate::dataset::{self, write_json, IMAGE};
use crate::error::invalid;

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct SynthArgs {
    /// A checkpoint.c2ck written by train.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A case directory (condition volumes, or a wm.obj/pial.obj pair) or a dataset of them.
    #[arg(long)]
    pub condition: PathBuf,
    /// Output directory; dataset inputs get one subdirectory per case.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Sampling steps (a DDIM subsequence of the training schedule).
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    /// Stochasticity: 0 is deterministic, 1 the full posterior variance.
    #[arg(long, default_value_t = 0.0)]
    pub eta: f64,
    /// Use the raw training weights instead of the EMA weights.
    #[arg(long)]
    pub raw: bool,
    /// Voxel spacing for surface pairs that come without an image grid.
    #[arg(long, default_value_t = 1.0)]
    pub spacing: f64,
}

/// A loaded checkpoint ready for sampling.
pub struct Synthesizer {
    pub model: Model,
    pub schedule: BridgeSchedule,
    pub checkpoint_sha256: String,
}

impl Synthesizer {
    pub fn load(path: &Path, raw: bool) -> Result<Synthesizer> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let ck = Checkpoint::from_bytes(&bytes)
            .with_context(|| format!("loading {}", path.display()))?;
        let schedule = BridgeSchedule::new(ck.train.total_steps)?;
        let model = if raw {
            Model::from_params(ck.denoiser.clone(), ck.raw)?
        } else {
            ck.ema_model()?
        };
        Ok(Synthesizer {
            model,
            schedule,
            checkpoint_sha256: dataset::sha256_hex(&bytes),
        })
    }

    pub fn resolution(&self) -> usize {
        self.model.config().resolution
    }

    /// Grid used for surface pairs that have no image of their own.
    pub fn default_grid(&self, spacing: f64) -> Result<Grid> {
        Ok(Grid::centered_cube(self.resolution(), spacing)?)
    }

    pub fn check_grid(&self, grid: &Grid) -> Result<()> {
        let n = self.resolution();
        if grid.dims != [n; 3] {
            return Err(invalid(format!(
                "condition dims {:?} do not match the checkpoint resolution {n}³",
                grid.dims
            )));
        }
        Ok(())
    }

    pub fn synthesize(
        &self,
        cond: &ConditionSet,
        n_steps: usize,
        eta: f64,
        seed: u64,
        sample_id: u64,
    ) -> Result<Volume> {
        self.check_grid(cond.grid())?;
        let cfg = self.model.config();
        let cond = cond.clone().with_active(cfg.aux);
        let den = NetDenoiser {
            model: &self.model,
            total_steps: self.schedule.total_steps(),
        };
        let sampler = SamplerConfig {
            n_steps,
            eta,
            primary: cfg.primary,
            seed,
            sample_id,
        };
        Ok(sample(&den, &cond, &self.schedule, &sampler)?)
    }

    /// Write the image and its provenance record into `dir`.
    pub fn emit(
        &self,
        image: &Volume,
        cond: &ConditionSet,
        dir: &Path,
        prov: serde_json::Value,
    ) -> Result<()> {
        super::ensure_dir(dir)?;
        image.write(dir.join(IMAGE))?;
        let mut record = serde_json::json!({
            "condition_sha256": dataset::condition_hash(cond),
            "checkpoint_sha256": self.checkpoint_sha256,
            "aux": self.model.config().aux.to_string(),
            "primary": format!("{:?}", self.model.config().primary),
        });
        if let (Some(r), serde_json::Value::Object(extra)) = (record.as_object_mut(), prov) {
            r.extend(extra);
        }
        write_json(&dir.join("provenance.json"), &record)
    }
}

pub fn run(a: &SynthArgs, seed: u64) -> Result<serde_json::Value> {
    if !(0.0..=1.0).contains(&a.eta) {
        return Err(invalid(format!("--eta must be in [0, 1], got {}", a.eta)));
    }
    let synth = Synthesizer::load(&a.checkpoint, a.raw)?;
    let cases = dataset::cases(&a.condition, |c| c.has_conditions() || c.has_meshes())?;
    let aux = synth.model.config().aux;
    let mut labels = Vec::new();
    for (i, case) in cases.iter().enumerate() {
        let grid = if case.has_conditions() {
            None
        } else {
            Some(
                case.image_grid()?
                    .map_or_else(|| synth.default_grid(a.spacing), Ok)?,
            )
        };
        let cond = case
            .condition(grid, aux)
            .with_context(|| format!("case {}", case.label()))?;
        let image = synth
            .synthesize(&cond, a.steps, a.eta, seed, i as u64)
            .with_context(|| format!("case {}", case.label()))?;
        let prov = serde_json::json!({
            "case": case.label(),
            "seed": seed,
            "sample_id": i,
            "n_steps": a.steps,
            "eta": a.eta,
            "weights": if a.raw { "raw" } else { "ema" },
        });
        synth.emit(&image, &cond, &case.out_dir(&a.out), prov)?;
        log::info!("synthesized {}", case.label());
        labels.push(case.label());
    }
    Ok(serde_json::json!({
        "denoiser": synth.model.config(),
        "T": synth.schedule.total_steps(),
        "cases": labels,
    }))
}
