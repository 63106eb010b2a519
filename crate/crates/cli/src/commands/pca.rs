use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{Context, Result};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use c2v_core::geometry::{ribbon_from_midthickness, ribbon_sample, save_mesh};
use c2v_core::rng;
use c2v_core::shapemodel::{
    lerp_sample, outlier_filter, slerp_sample, LatentPoint, PcaModel, SlerpRadius,
};

use crate::dataset::{self, write_json, Case, PIAL, WHITE};
use crate::error::invalid;

pub const MODEL_FILE: &str = "model.c2pc";

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct PcaFitArgs {
    /// Dataset of surface pairs with shared connectivity.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory for model.c2pc and summary.json.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Keep exactly this many components (overrides --variance).
    #[arg(long)]
    pub components: Option<usize>,
    /// Keep the fewest components explaining this fraction of the variance.
    #[arg(long, default_value_t = 0.95)]
    pub variance: f64,
}

fn ribbon_samples(cases: &[Case]) -> Result<Vec<c2v_core::TriMesh>> {
    cases
        .par_iter()
        .map(|c| {
            let (pial, white) = c.meshes()?;
            ribbon_sample(&pial, &white).with_context(|| format!("case {}", c.label()))
        })
        .collect()
}

pub fn fit(a: &PcaFitArgs, _seed: u64) -> Result<serde_json::Value> {
    if !(a.variance > 0.0 && a.variance <= 1.0) {
        return Err(invalid(format!(
            "--variance must be in (0, 1], got {}",
            a.variance
        )));
    }
    let cases = dataset::cases(&a.dataset, Case::has_meshes)?;
    let samples = ribbon_samples(&cases)?;
    let full = PcaModel::fit(&samples, samples.len().saturating_sub(1).max(1))?;
    let k = match a.components {
        Some(k) => k,
        None => full.components_for(a.variance),
    };
    let model = full.truncated(k)?;
    model.save(a.out.join(MODEL_FILE))?;
    let ratio = model.explained_variance_ratio();
    let summary = serde_json::json!({
        "samples": samples.len(),
        "vertices": model.vertex_count(),
        "components": k,
        "explained_variance_ratio": ratio,
        "cumulative": ratio.iter().sum::<f64>(),
        "variances": model.variances(),
    });
    write_json(&a.out.join("summary.json"), &summary)?;
    Ok(serde_json::json!({ "components": k, "samples": samples.len() }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    Slerp,
    Lerp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RadiusArg {
    /// Keep the radius of the first endpoint.
    First,
    /// Interpolate the endpoint radii linearly.
    Interpolated,
}

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct PcaSampleArgs {
    /// A model.c2pc written by pca-fit.
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory for the generated cases.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Number of samples drawn (before outlier filtering).
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, value_enum, default_value_t = Interpolation::Slerp)]
    pub method: Interpolation,
    /// Interpolation weight; drawn uniformly from [0, 1] per sample when absent.
    #[arg(long)]
    pub phi: Option<f64>,
    #[arg(long, value_enum, default_value_t = RadiusArg::First)]
    pub radius: RadiusArg,
    /// Drop samples whose re-embedded component scores exceed this magnitude.
    #[arg(long, default_value_t = 1000.0)]
    pub filter: f64,
}

#[derive(Debug, Serialize)]
struct Draw {
    e1: Vec<f64>,
    e2: Vec<f64>,
    phi: f64,
    latent: Vec<f64>,
    mahalanobis: f64,
}

pub fn sample(a: &PcaSampleArgs, seed: u64) -> Result<serde_json::Value> {
    if a.count == 0 {
        return Err(invalid("--count must be at least 1"));
    }
    if let Some(phi) = a.phi {
        if !(0.0..=1.0).contains(&phi) {
            return Err(invalid(format!("--phi must be in [0, 1], got {phi}")));
        }
    }
    let model = PcaModel::load(&a.model)?;
    let sd: Vec<f64> = model
        .variances()
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .collect();
    let radius = match a.radius {
        RadiusArg::First => SlerpRadius::First,
        RadiusArg::Interpolated => SlerpRadius::Interpolated,
    };
    let draws: Vec<Draw> = (0..a.count as u64)
        .map(|i| -> Result<Draw> {
            let mut r = rng::stream(seed, "pca-sample", &[i]);
            let mut endpoint = || {
                let z = rng::standard_normal(&mut r, sd.len());
                LatentPoint(z.iter().zip(&sd).map(|(z, s)| z * s).collect())
            };
            let (e1, e2) = (endpoint(), endpoint());
            let phi = a.phi.unwrap_or_else(|| r.random::<f64>());
            let e = match a.method {
                Interpolation::Slerp => slerp_sample(&e1, &e2, phi, radius)?,
                Interpolation::Lerp => lerp_sample(&e1, &e2, phi)?,
            };
            Ok(Draw {
                mahalanobis: model.mahalanobis(&e)?,
                e1: e1.0,
                e2: e2.0,
                phi,
                latent: e.0,
            })
        })
        .collect::<Result<_>>()?;
    let meshes: Vec<_> = draws
        .iter()
        .map(|d| model.invert(&LatentPoint(d.latent.clone())))
        .collect::<c2v_core::Result<_>>()?;
    let kept = outlier_filter(&model, &meshes, a.filter)?;
    for &i in &kept.retained {
        let (pial, white) = ribbon_from_midthickness(&meshes[i])?;
        let dir = a.out.join(format!("sample_{i:04}"));
        super::ensure_dir(&dir)?;
        save_mesh(&pial.without_thickness(), dir.join(PIAL))?;
        save_mesh(&white.without_thickness(), dir.join(WHITE))?;
        write_json(&dir.join("latent.json"), &draws[i])?;
    }
    let summary = serde_json::json!({
        "drawn": a.count,
        "retained": kept.retained,
        "dropped": kept.dropped,
        "mean_mahalanobis": draws.iter().map(|d| d.mahalanobis).sum::<f64>() / draws.len() as f64,
    });
    write_json(&a.out.join("summary.json"), &summary)?;
    Ok(serde_json::json!({ "components": model.components(), "retained": kept.retained.len() }))
}

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct PcaMahalanobisArgs {
    /// A model.c2pc written by pca-fit.
    #[arg(long)]
    pub model: PathBuf,
    /// A case directory or a dataset.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for mahalanobis.csv.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

pub fn mahalanobis(a: &PcaMahalanobisArgs, _seed: u64) -> Result<serde_json::Value> {
    let model = PcaModel::load(&a.model)?;
    let cases = dataset::cases(&a.input, Case::has_meshes)?;
    let samples = ribbon_samples(&cases)?;
    let mut csv = String::from("case,mahalanobis\n");
    for (c, s) in cases.iter().zip(&samples) {
        let d = model.mahalanobis(&model.embed(s)?)?;
        let _ = writeln!(csv, "{},{d:e}", c.label());
    }
    let path = a.out.join("mahalanobis.csv");
    std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    Ok(serde_json::json!({ "cases": cases.len(), "components": model.components() }))
}
