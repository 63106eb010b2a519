use std::path::PathBuf;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use c2v_core::geometry::save_mesh;
use c2v_core::phantom::PhantomSpec;

use crate::dataset::{write_json, IMAGE, PIAL, WHITE};
use crate::error::invalid;

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct PhantomArgs {
    /// Dataset directory to create; cases go to case_0000, case_0001, ...
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Number of cases.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Index of the first case; case seeds depend on the index, so a dataset can be extended.
    #[arg(long, default_value_t = 0)]
    pub first: usize,
    /// JSON phantom description used as the base; the flags below override it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Cubic grid size in voxels.
    #[arg(long)]
    pub dims: Option<usize>,
    /// Voxel spacing in world units.
    #[arg(long)]
    pub spacing: Option<f64>,
    /// Mean inner and outer radius, "INNER,OUTER".
    #[arg(long)]
    pub radii: Option<String>,
    /// Inclusive harmonic degree range of the bumps, "LO,HI".
    #[arg(long)]
    pub bump_degrees: Option<String>,
    /// Scale of the shared radial bumps.
    #[arg(long)]
    pub shape_amplitude: Option<f64>,
    /// Scale of the thickness modulation.
    #[arg(long)]
    pub thickness_amplitude: Option<f64>,
    /// Standard deviation of the additive image noise.
    #[arg(long)]
    pub noise_sigma: Option<f64>,
}

fn pair<T: std::str::FromStr>(s: &str, what: &str) -> Result<[T; 2]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => match (a.parse(), b.parse()) {
            (Ok(a), Ok(b)) => Ok([a, b]),
            _ => Err(invalid(format!("{what}: cannot parse {s:?}"))),
        },
        _ => Err(invalid(format!(
            "{what} expects two comma-separated values, got {s:?}"
        ))),
    }
}

pub fn base_spec(a: &PhantomArgs) -> Result<PhantomSpec> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => PhantomSpec::default(),
    };
    if let Some(d) = a.dims {
        spec.dims = [d; 3];
    }
    if let Some(s) = a.spacing {
        spec.spacing = s;
    }
    if let Some(r) = &a.radii {
        [spec.inner_radius, spec.outer_radius] = pair(r, "--radii")?;
    }
    if let Some(b) = &a.bump_degrees {
        spec.bump_degrees = pair(b, "--bump-degrees")?;
    }
    if let Some(v) = a.shape_amplitude {
        spec.shape_amplitude = v;
    }
    if let Some(v) = a.thickness_amplitude {
        spec.thickness_amplitude = v;
    }
    if let Some(v) = a.noise_sigma {
        spec.noise_sigma = v;
    }
    Ok(spec)
}

pub fn run(a: &PhantomArgs, seed: u64) -> Result<serde_json::Value> {
    if a.count == 0 {
        return Err(invalid("--count must be at least 1"));
    }
    let base = base_spec(a)?;
    let specs = base.population(a.first + a.count, seed);
    (a.first..a.first + a.count)
        .into_par_iter()
        .try_for_each(|i| -> Result<()> {
            let spec = &specs[i];
            let ph = spec
                .generate()
                .with_context(|| format!("phantom case {i}"))?;
            let dir = a.out.join(format!("case_{i:04}"));
            super::ensure_dir(&dir)?;
            save_mesh(&ph.white, dir.join(WHITE))?;
            save_mesh(&ph.pial, dir.join(PIAL))?;
            ph.image.write(dir.join(IMAGE))?;
            write_json(&dir.join("spec.json"), spec)
        })?;
    log::info!("wrote {} phantom cases to {}", a.count, a.out.display());
    Ok(serde_json::json!({ "base_spec": base, "cases": a.count, "first": a.first }))
}
