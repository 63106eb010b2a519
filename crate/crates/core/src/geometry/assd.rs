//! Average symmetric surface distance between sampled surfaces.

use nalgebra::Point3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::bvh::Bvh;
use super::mesh::TriMesh;
use crate::error::{Error, Result};
use crate::rng;

/// Area-weighted triangle choice followed by uniform barycentric sampling.
pub fn sample_surface(mesh: &TriMesh, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Point3<f64>>> {
    let mut cdf = Vec::with_capacity(mesh.face_count());
    let mut total = 0.0;
    for f in 0..mesh.face_count() {
        total += mesh.face_area(f);
        cdf.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::DegenerateMesh("surface has zero total area".into()));
    }
    Ok((0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * total;
            let face = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            let s = r1.sqrt();
            let [a, b, c] = mesh.triangle(face);
            Point3::from(a.coords * (1.0 - s) + b.coords * (s * (1.0 - r2)) + c.coords * (s * r2))
        })
        .collect())
}

fn distance_sum(points: &[Point3<f64>], target: &Bvh) -> f64 {
    let d: Vec<f64> = points.par_iter().map(|p| target.distance(p)).collect();
    d.iter().sum()
}

/// ASSD with explicit sample streams for each surface.
pub fn assd_seeded(
    s_hat: &TriMesh,
    s: &TriMesh,
    n_points: usize,
    seed_hat: u64,
    seed: u64,
) -> Result<f64> {
    if n_points == 0 {
        return Err(Error::InvalidArgument("n_points must be >= 1".into()));
    }
    let p_hat = sample_surface(
        s_hat,
        n_points,
        &mut rng::stream(seed_hat, "assd-points", &[]),
    )?;
    let p = sample_surface(s, n_points, &mut rng::stream(seed, "assd-points", &[]))?;
    let forward = distance_sum(&p_hat, &Bvh::build(s));
    let backward = distance_sum(&p, &Bvh::build(s_hat));
    Ok((forward + backward) / (p_hat.len() + p.len()) as f64)
}

/// ASSD where both surfaces draw from streams derived from one seed.
pub fn assd(s_hat: &TriMesh, s: &TriMesh, n_points: usize, seed: u64) -> Result<f64> {
    assd_seeded(
        s_hat,
        s,
        n_points,
        rng::derive_seed(seed, "assd", &[0]),
        rng::derive_seed(seed, "assd", &[1]),
    )
}
