use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use c2v_core::geometry::{assd, components_by_size, enclosed_isosurface, extract_isosurface};
use c2v_core::metrics::{evaluate, mr_ssim, MetricReport, SsimParams};
use c2v_core::{rng, TriMesh, Volume};

use crate::dataset::{self, write_json, Case};
use crate::error::invalid;

/// Bumped whenever the column set of report.csv changes.
pub const CSV_VERSION: u32 = 1;
pub const CSV_COLUMNS: [&str; 7] = [
    "case",
    "psnr",
    "ssim",
    "data_range",
    "mr_ssim",
    "assd_white",
    "assd_pial",
];

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct EvalArgs {
    /// A case directory with image.c2vx or a dataset of them.
    #[arg(long)]
    pub generated: PathBuf,
    /// Reference case or dataset; dataset cases are matched by directory name.
    #[arg(long)]
    pub reference: PathBuf,
    /// Output directory for report.json and report.csv.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Intensity range for PSNR/SSIM; default max - min of each reference.
    #[arg(long)]
    pub data_range: Option<f64>,
    /// Compute ASSD against the reference cases' wm.obj/pial.obj. Generated cases
    /// that carry their own meshes use them; otherwise surfaces are extracted from
    /// the generated image at --pial-level and --white-level.
    #[arg(long)]
    pub meshes: bool,
    /// Iso level separating background from cortex.
    #[arg(long, default_value_t = 0.5)]
    pub pial_level: f64,
    /// Iso level separating cortex from the interior (only its crossing around
    /// the enclosed interior is used).
    #[arg(long, default_value_t = 0.85)]
    pub white_level: f64,
    /// Surface points sampled per surface for ASSD.
    #[arg(long, default_value_t = 100_000)]
    pub assd_points: usize,
    /// Also compute MR-SSIM against the whole reference set as a pool.
    #[arg(long)]
    pub pool: bool,
    /// References drawn per generated image for MR-SSIM.
    #[arg(long, default_value_t = 5)]
    pub n_refs: usize,
}

#[derive(Debug, Serialize)]
pub struct CaseReport {
    pub case: String,
    #[serde(flatten)]
    pub metrics: MetricReport,
}

/// Largest connected piece of the iso-surface, or `None` if the level is never crossed.
pub fn iso_surface(image: &Volume, level: f64) -> Result<Option<TriMesh>> {
    let iso = extract_isosurface(image, level)?;
    Ok(components_by_size(&iso).into_iter().next())
}

/// Inner boundary of the bright ribbon: the white level is crossed again on
/// the ribbon's outer face, so only crossings around enclosed darker tissue count.
pub fn white_surface(image: &Volume, level: f64) -> Result<Option<TriMesh>> {
    let iso = enclosed_isosurface(image, level)?;
    Ok(components_by_size(&iso).into_iter().next())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:e}"))
}

pub fn run(a: &EvalArgs, seed: u64) -> Result<serde_json::Value> {
    if let Some(r) = a.data_range {
        if !(r > 0.0) {
            return Err(invalid(format!("--data-range must be positive, got {r}")));
        }
    }
    let generated = dataset::cases(&a.generated, Case::has_image)?;
    let pairs: Vec<(Case, Case)> = generated
        .into_iter()
        .map(|g| {
            let r = Case {
                name: g.name.clone(),
                dir: if g.name.is_empty() {
                    a.reference.clone()
                } else {
                    a.reference.join(&g.name)
                },
            };
            if !r.has_image() {
                return Err(invalid(format!(
                    "no reference image for {} at {}",
                    g.label(),
                    r.dir.display()
                )));
            }
            if a.meshes && !r.has_meshes() {
                return Err(invalid(format!(
                    "--meshes given but {} has no wm.obj/pial.obj",
                    r.dir.display()
                )));
            }
            Ok((g, r))
        })
        .collect::<Result<_>>()?;

    let pool: Vec<Volume> = if a.pool {
        let all = dataset::cases(&a.reference, Case::has_image)?;
        let pool = all.iter().map(Case::image).collect::<Result<Vec<_>>>()?;
        if pool.len() < a.n_refs {
            return Err(invalid(format!(
                "--n-refs {} exceeds the reference pool of {}",
                a.n_refs,
                pool.len()
            )));
        }
        pool
    } else {
        Vec::new()
    };

    let reports: Vec<CaseReport> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, (g, r))| -> Result<CaseReport> {
            let gen = g.image()?;
            let reference = r.image()?;
            let mut m = evaluate(&gen, &reference, a.data_range, false)
                .with_context(|| format!("case {}", g.label()))?;
            if a.pool {
                let params = SsimParams::with_range(m.data_range);
                let s = rng::derive_seed(seed, "eval-mr-ssim", &[i as u64]);
                m.mr_ssim = Some(mr_ssim(&gen, &pool, a.n_refs, s, &params)?);
            }
            if a.meshes {
                let (ref_pial, ref_white) = r.meshes()?;
                let (gen_pial, gen_white) = if g.has_meshes() {
                    let (p, w) = g.meshes()?;
                    (Some(p), Some(w))
                } else {
                    (
                        iso_surface(&gen, a.pial_level)?,
                        white_surface(&gen, a.white_level)?,
                    )
                };
                let score =
                    |surface: Option<TriMesh>, target: &TriMesh, which: u64| -> Result<f64> {
                        match surface {
                            Some(s) => Ok(assd(
                                &s,
                                target,
                                a.assd_points,
                                rng::derive_seed(seed, "eval-assd", &[i as u64, which]),
                            )?),
                            None => {
                                log::warn!("case {}: iso-surface {which} is empty", g.label());
                                Ok(f64::INFINITY)
                            }
                        }
                    };
                m.assd_white = Some(score(gen_white, &ref_white, 0)?);
                m.assd_pial = Some(score(gen_pial, &ref_pial, 1)?);
            }
            Ok(CaseReport {
                case: g.label(),
                metrics: m,
            })
        })
        .collect::<Result<_>>()?;

    let mut csv = format!("# c2v eval v{CSV_VERSION}\n{}\n", CSV_COLUMNS.join(","));
    for c in &reports {
        let m = &c.metrics;
        let _ = writeln!(
            csv,
            "{},{},{:e},{:e},{},{},{}",
            c.case,
            if m.psnr.is_infinite() {
                "inf".to_string()
            } else {
                format!("{:e}", m.psnr)
            },
            m.ssim,
            m.data_range,
            opt(m.mr_ssim),
            opt(m.assd_white),
            opt(m.assd_pial)
        );
    }
    let path = a.out.join("report.csv");
    std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;

    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&MetricReport) -> Option<f64>| -> Option<f64> {
        let v: Vec<f64> = reports.iter().filter_map(|c| f(&c.metrics)).collect();
        (v.len() == reports.len()).then(|| v.iter().sum::<f64>() / n)
    };
    let summary = serde_json::json!({
        "ssim": mean(&|m| Some(m.ssim)),
        "psnr": mean(&|m| m.psnr.is_finite().then_some(m.psnr)),
        "mr_ssim": mean(&|m| m.mr_ssim),
        "assd_white": mean(&|m| m.assd_white),
        "assd_pial": mean(&|m| m.assd_pial),
    });
    write_json(
        &a.out.join("report.json"),
        &serde_json::json!({ "csv_version": CSV_VERSION, "cases": reports, "mean": summary }),
    )?;
    Ok(
        serde_json::json!({ "cases": reports.len(), "csv_version": CSV_VERSION, "pool": pool.len() }),
    )
}
