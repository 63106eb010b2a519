//! Paired-surface measurements and deformations: midthickness, vertex-wise
//! thickness and pial atrophy simulation.

use nalgebra::{Point3, Vector3};

use super::bvh::Bvh;
use super::mesh::{Face, TriMesh};
use super::sdf::SignedDistanceField;
use crate::error::{Error, Result};

/// Default atrophy step (mm); normals are recomputed after every step.
pub const ATROPHY_STEP: f64 = 0.05;

pub fn midthickness(pial: &TriMesh, white: &TriMesh) -> Result<TriMesh> {
    pial.check_correspondence(white)?;
    let verts = pial
        .vertices()
        .iter()
        .zip(white.vertices())
        .map(|(p, w)| Point3::from((p.coords + w.coords) * 0.5))
        .collect();
    TriMesh::new(verts, pial.faces().to_vec())
}

/// Mean of the two one-sided vertex-to-surface distances, per vertex.
pub fn cortical_thickness(pial: &TriMesh, white: &TriMesh) -> Result<Vec<f64>> {
    pial.check_correspondence(white)?;
    let to_white = Bvh::build(white);
    let to_pial = Bvh::build(pial);
    Ok(pial
        .vertices()
        .iter()
        .zip(white.vertices())
        .map(|(p, w)| 0.5 * (to_white.distance(p) + to_pial.distance(w)))
        .collect())
}

/// Midthickness mesh carrying the thickness channel: one shape-model sample.
pub fn ribbon_sample(pial: &TriMesh, white: &TriMesh) -> Result<TriMesh> {
    let thickness = cortical_thickness(pial, white)?;
    midthickness(pial, white)?.with_thickness(thickness)
}

/// Rebuild a surface pair from a midthickness mesh with thickness by offsetting
/// each vertex half the thickness along its normal in either direction.
pub fn ribbon_from_midthickness(mid: &TriMesh) -> Result<(TriMesh, TriMesh)> {
    let thickness = mid.thickness().ok_or_else(|| {
        Error::InvalidArgument("midthickness mesh has no thickness channel".into())
    })?;
    let normals = mid.vertex_normals();
    let offset = |sign: f64| -> Vec<Point3<f64>> {
        mid.vertices()
            .iter()
            .zip(&normals)
            .zip(thickness)
            .map(|((v, n), &t)| v + n * (sign * 0.5 * t.max(0.0)))
            .collect()
    };
    Ok((
        mid.with_vertices(offset(1.0))?,
        mid.with_vertices(offset(-1.0))?,
    ))
}

#[derive(Debug, Clone)]
pub struct AtrophyOutcome {
    pub pial: TriMesh,
    /// Cumulative inward displacement per vertex.
    pub displacement: Vec<f64>,
    /// Vertices stopped by the white-matter clearance rule before reaching `delta`.
    pub clamped: Vec<bool>,
}

impl AtrophyOutcome {
    pub fn clamped_count(&self) -> usize {
        self.clamped.iter().filter(|&&c| c).count()
    }
}

/// Move pial vertices inward along their angle-weighted normals in steps of
/// `step` until each has travelled `delta` or the next step would leave less than
/// `step` of clearance outside the white-matter surface.
pub fn simulate_atrophy(
    pial: &TriMesh,
    white: &TriMesh,
    delta: f64,
    region: Option<&[bool]>,
) -> Result<AtrophyOutcome> {
    simulate_atrophy_with_step(pial, white, delta, region, ATROPHY_STEP)
}

pub fn simulate_atrophy_with_step(
    pial: &TriMesh,
    white: &TriMesh,
    delta: f64,
    region: Option<&[bool]>,
    step: f64,
) -> Result<AtrophyOutcome> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "atrophy delta must be >= 0, got {delta}"
        )));
    }
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "atrophy step must be > 0, got {step}"
        )));
    }
    pial.check_correspondence(white)?;
    if let Some(mask) = region {
        if mask.len() != pial.vertex_count() {
            return Err(Error::Correspondence(format!(
                "region mask has {} entries for {} vertices",
                mask.len(),
                pial.vertex_count()
            )));
        }
    }
    let n = pial.vertex_count();
    let mut verts = pial.vertices().to_vec();
    let mut displacement = vec![0.0; n];
    let mut clamped = vec![false; n];
    let in_region = |i: usize| region.is_none_or(|m| m[i]);
    let mut active: Vec<bool> = (0..n).map(|i| delta > 0.0 && in_region(i)).collect();
    if active.iter().any(|&a| a) {
        let white_sdf = SignedDistanceField::new(white)?;
        let faces = pial.faces();
        // tolerance on the cumulative sum so e.g. 6 x 0.05 counts as 0.3
        let eps = 1e-9 * step;
        while active.iter().any(|&a| a) {
            let normals = vertex_normals(&verts, faces);
            for i in 0..n {
                if !active[i] {
                    continue;
                }
                let remaining = delta - displacement[i];
                if remaining <= eps {
                    active[i] = false;
                    continue;
                }
                let h = step.min(remaining);
                let candidate = verts[i] - normals[i] * h;
                if white_sdf.distance(&candidate) < step {
                    clamped[i] = true;
                    active[i] = false;
                    continue;
                }
                verts[i] = candidate;
                displacement[i] += h;
                if delta - displacement[i] <= eps {
                    active[i] = false;
                }
            }
        }
        let region_count = (0..n).filter(|&i| in_region(i)).count();
        let clamped_count = clamped.iter().filter(|&&c| c).count();
        if region_count > 0 && clamped_count == region_count {
            log::warn!("atrophy of {delta} clamped every one of {region_count} region vertices at the white surface");
        }
    }
    Ok(AtrophyOutcome {
        pial: TriMesh::new(verts, pial.faces().to_vec())?,
        displacement,
        clamped,
    })
}

fn vertex_normals(verts: &[Point3<f64>], faces: &[Face]) -> Vec<Vector3<f64>> {
    let mut acc = vec![Vector3::zeros(); verts.len()];
    for face in faces {
        let [a, b, c] = face.map(|i| verts[i]);
        let cross = (b - a).cross(&(c - a));
        let len = cross.norm();
        if len == 0.0 {
            continue;
        }
        let n = cross / len;
        for corner in 0..3 {
            let p = verts[face[corner]];
            let u = verts[face[(corner + 1) % 3]] - p;
            let v = verts[face[(corner + 2) % 3]] - p;
            acc[face[corner]] += n * u.angle(&v);
        }
    }
    acc.into_iter()
        .map(|n| {
            let len = n.norm();
            if len > 0.0 {
                n / len
            } else {
                n
            }
        })
        .collect()
}
