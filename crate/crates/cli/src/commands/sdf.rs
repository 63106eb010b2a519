use std::path::PathBuf;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use c2v_core::geometry::{default_edge_tau, AuxChannels, ConditionSet};
use c2v_core::Grid;

use crate::dataset::{self, Case};
use crate::error::invalid;

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct SdfArgs {
    /// A case directory (wm.obj + pial.obj) or a dataset of them.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory; defaults to writing next to the meshes.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// Cubic grid size; by default the grid of the case's image.c2vx.
    #[arg(long)]
    pub dims: Option<usize>,
    /// Voxel spacing used with --dims.
    #[arg(long, default_value_t = 1.0)]
    pub spacing: f64,
    /// Edge-map band half-width; default half the smallest voxel spacing.
    #[arg(long)]
    pub tau: Option<f64>,
}

fn case_grid(a: &SdfArgs, case: &Case) -> Result<Grid> {
    if let Some(n) = a.dims {
        return Ok(Grid::centered_cube(n, a.spacing)?);
    }
    case.image_grid()?.ok_or_else(|| {
        invalid(format!(
            "{} has no image.c2vx; pass --dims",
            case.dir.display()
        ))
    })
}

pub fn run(a: &SdfArgs, _seed: u64) -> Result<serde_json::Value> {
    let out = a.out.clone().unwrap_or_else(|| a.input.clone());
    let cases = dataset::cases(&a.input, Case::has_meshes)?;
    if let Some(t) = a.tau {
        if !(t > 0.0) {
            return Err(invalid(format!("--tau must be positive, got {t}")));
        }
    }
    let written: Vec<(String, usize)> = cases
        .par_iter()
        .map(|case| -> Result<(String, usize)> {
            let grid = case_grid(a, case)?;
            let (pial, white) = case.meshes()?;
            let s_p = c2v_core::geometry::sample_sdf_grid(&pial, grid)?;
            let s_w = c2v_core::geometry::sample_sdf_grid(&white, grid)?;
            let cond = ConditionSet::from_sdfs(s_p, s_w, a.tau, AuxChannels::ALL)?.quantized();
            let dir = case.out_dir(&out);
            super::ensure_dir(&dir)?;
            dataset::write_conditions(&cond, &dir)
                .with_context(|| format!("case {}", case.label()))?;
            let ribbon = cond.ribbon.data().iter().filter(|&&v| v == 1.0).count();
            if ribbon == 0 {
                log::warn!("case {}: empty ribbon", case.label());
            }
            Ok((case.label(), ribbon))
        })
        .collect::<Result<_>>()?;
    let tau = match (a.tau, a.dims) {
        (Some(t), _) => Some(t),
        (None, Some(n)) => Some(default_edge_tau(&Grid::centered_cube(n, a.spacing)?)),
        (None, None) => None,
    };
    Ok(serde_json::json!({
        "cases": written.iter().map(|(c, r)| serde_json::json!({ "case": c, "ribbon_voxels": r })).collect::<Vec<_>>(),
        "tau": tau.map_or_else(|| serde_json::json!("half the minimum image spacing"), |t| serde_json::json!(t)),
    }))
}
