use std::path::PathBuf;

use anyhow::{Context, Result};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use c2v_core::geometry::{
    cortical_thickness, save_mesh, simulate_atrophy, AuxChannels, ConditionSet,
};
use c2v_core::TriMesh;

use super::synth::Synthesizer;
use crate::dataset::{self, write_json, Case, PIAL, WHITE};
use crate::error::invalid;

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct AtrophyArgs {
    /// Case directory with wm.obj and pial.obj.
    #[arg(long)]
    pub case: PathBuf,
    /// Output directory for the deformed pair, atrophy.json and (with --checkpoint) the image.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Requested inward displacement of the pial surface, in world units.
    #[arg(long)]
    pub delta: f64,
    /// Restrict thinning to a cap "X,Y,Z,DEGREES": vertices whose direction from the
    /// pial centroid is within DEGREES of the axis (X,Y,Z).
    #[arg(long, conflicts_with = "region_mask")]
    pub region_cap: Option<String>,
    /// Restrict thinning to vertices marked 1 in this file (one 0/1 per line).
    #[arg(long)]
    pub region_mask: Option<PathBuf>,
    /// Synthesize the post-atrophy image with this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Sampling steps when synthesizing.
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.0)]
    pub eta: f64,
    /// Voxel spacing when the case has no image grid.
    #[arg(long, default_value_t = 1.0)]
    pub spacing: f64,
}

/// Vertices within `degrees` of `axis`, seen from the vertex centroid.
pub fn cap_region(mesh: &TriMesh, axis: Vector3<f64>, degrees: f64) -> Vec<bool> {
    let n = mesh.vertex_count() as f64;
    let centroid = mesh
        .vertices()
        .iter()
        .fold(Vector3::zeros(), |acc, v| acc + v.coords)
        / n;
    let axis = axis.normalize();
    let cos_limit = degrees.to_radians().cos();
    mesh.vertices()
        .iter()
        .map(|v| {
            let d = v.coords - centroid;
            let norm = d.norm();
            norm > 0.0 && d.dot(&axis) / norm >= cos_limit
        })
        .collect()
}

fn region(a: &AtrophyArgs, pial: &TriMesh) -> Result<Option<Vec<bool>>> {
    if let Some(spec) = &a.region_cap {
        let v: Vec<f64> = spec
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| invalid(format!("--region-cap: cannot parse {spec:?}")))?;
        let [x, y, z, deg] = v[..] else {
            return Err(invalid(format!(
                "--region-cap expects X,Y,Z,DEGREES, got {spec:?}"
            )));
        };
        let axis = Vector3::new(x, y, z);
        if !(axis.norm() > 0.0) || !(deg > 0.0) {
            return Err(invalid(
                "--region-cap needs a nonzero axis and a positive angle",
            ));
        }
        return Ok(Some(cap_region(pial, axis, deg)));
    }
    if let Some(path) = &a.region_mask {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mask: Vec<bool> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| match l.trim() {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(invalid(format!(
                    "region mask entries must be 0 or 1, got {other:?}"
                ))),
            })
            .collect::<Result<_>>()?;
        if mask.len() != pial.vertex_count() {
            return Err(invalid(format!(
                "region mask has {} entries, pial mesh has {} vertices",
                mask.len(),
                pial.vertex_count()
            )));
        }
        return Ok(Some(mask));
    }
    Ok(None)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn run(a: &AtrophyArgs, seed: u64) -> Result<serde_json::Value> {
    let case = Case {
        name: String::new(),
        dir: a.case.clone(),
    };
    if !case.has_meshes() {
        return Err(invalid(format!(
            "{} has no wm.obj/pial.obj pair",
            a.case.display()
        )));
    }
    let (pial, white) = case.meshes()?;
    let region = region(a, &pial)?;
    let outcome = simulate_atrophy(&pial, &white, a.delta, region.as_deref())?;
    save_mesh(&outcome.pial, a.out.join(PIAL))?;
    save_mesh(&white, a.out.join(WHITE))?;

    let before = cortical_thickness(&pial, &white)?;
    let after = cortical_thickness(&outcome.pial, &white)?;
    let inside = |i: &usize| region.as_ref().is_none_or(|r| r[*i]);
    let idx = 0..before.len();
    let thinning_in = mean(idx.clone().filter(inside).map(|i| before[i] - after[i]));
    let thinning_out = mean(idx.filter(|i| !inside(i)).map(|i| before[i] - after[i]));
    let mut report = serde_json::json!({
        "delta": a.delta,
        "region_vertices": region.as_ref().map_or(pial.vertex_count(), |r| r.iter().filter(|&&b| b).count()),
        "clamped_vertices": outcome.clamped_count(),
        "mean_displacement": mean(outcome.displacement.iter().copied()),
        "mean_thickness_before": mean(before.iter().copied()),
        "mean_thickness_after": mean(after.iter().copied()),
        "mean_thinning_in_region": thinning_in,
        "mean_thinning_outside_region": thinning_out,
    });

    if let Some(ck) = &a.checkpoint {
        let synth = Synthesizer::load(ck, false)?;
        let grid = case
            .image_grid()?
            .map_or_else(|| synth.default_grid(a.spacing), Ok)?;
        synth.check_grid(&grid)?;
        let cond =
            ConditionSet::from_meshes(&outcome.pial, &white, grid, AuxChannels::ALL)?.quantized();
        let image = synth.synthesize(&cond, a.steps, a.eta, seed, 0)?;
        let prov = serde_json::json!({
            "seed": seed,
            "sample_id": 0,
            "n_steps": a.steps,
            "eta": a.eta,
            "weights": "ema",
        });
        synth.emit(&image, &cond, &a.out, prov)?;
        report["image"] = serde_json::json!(dataset::IMAGE);
    }
    write_json(&a.out.join("atrophy.json"), &report)?;
    Ok(report)
}
