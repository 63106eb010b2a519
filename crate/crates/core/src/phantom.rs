//! Synthetic nested-shell phantoms: a white-matter-like inner surface, a
//! pial-like outer surface with vertex correspondence, and a paired intensity
//! image with smooth bias and Gaussian noise.

use nalgebra::{Point3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{fuse_voxel, SignedDistanceField, TriMesh};
use crate::rng;
use crate::volume::{Grid, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub inner_radius: f64,
    pub outer_radius: f64,
    pub subdivision: u32,
    /// Inclusive harmonic degree range of the bump and thickness fields.
    pub bump_degrees: [u32; 2],
    /// Coefficient scale of the shared radial displacement; degree `l` draws with std `amplitude / l`.
    pub shape_amplitude: f64,
    /// Coefficient scale of the gap modulation.
    pub thickness_amplitude: f64,
    pub background: f64,
    pub interior: f64,
    pub ribbon: f64,
    pub noise_sigma: f64,
    /// Multiplicative bias stays within `1 ± bias_amplitude`.
    pub bias_amplitude: f64,
    /// Spatial wavelength of the bias field, in world units.
    pub bias_wavelength: f64,
    pub dims: [usize; 3],
    pub spacing: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            inner_radius: 8.5,
            outer_radius: 11.5,
            subdivision: 3,
            bump_degrees: [2, 4],
            shape_amplitude: 0.3,
            thickness_amplitude: 0.15,
            background: 0.0,
            interior: 0.7,
            ribbon: 1.0,
            noise_sigma: 0.03,
            bias_amplitude: 0.1,
            bias_wavelength: 48.0,
            dims: [32; 3],
            spacing: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub white: TriMesh,
    pub pial: TriMesh,
    pub image: Volume,
}

/// Real spherical harmonic of degree `l`, order `m`, normalized so its mean square over the sphere is 1.
pub fn real_harmonic(l: u32, m: i32, dir: &Vector3<f64>) -> f64 {
    let am = m.unsigned_abs();
    assert!(am <= l, "order {m} out of range for degree {l}");
    let u = dir.normalize();
    let z = u.z.clamp(-1.0, 1.0);
    let phi = u.y.atan2(u.x);
    let p = assoc_legendre(l, am, z);
    let mut ratio = 1.0; // (l-m)!/(l+m)!
    for i in (l - am + 1)..=(l + am) {
        ratio /= i as f64;
    }
    let norm = ((2 * l + 1) as f64 * ratio).sqrt();
    match m.cmp(&0) {
        std::cmp::Ordering::Equal => norm * p,
        std::cmp::Ordering::Greater => {
            std::f64::consts::SQRT_2 * norm * p * (am as f64 * phi).cos()
        }
        std::cmp::Ordering::Less => std::f64::consts::SQRT_2 * norm * p * (am as f64 * phi).sin(),
    }
}

/// `P_l^m(x)` without the Condon-Shortley phase.
fn assoc_legendre(l: u32, m: u32, x: f64) -> f64 {
    let s = (1.0 - x * x).max(0.0).sqrt();
    let mut pmm = 1.0;
    for i in 0..m {
        pmm *= (2 * i + 1) as f64 * s;
    }
    if l == m {
        return pmm;
    }
    let mut pm1 = x * (2 * m + 1) as f64 * pmm;
    if l == m + 1 {
        return pm1;
    }
    let mut pm0 = pmm;
    for ll in (m + 2)..=l {
        let next = ((2 * ll - 1) as f64 * x * pm1 - (ll + m - 1) as f64 * pm0) / (ll - m) as f64;
        pm0 = pm1;
        pm1 = next;
    }
    pm1
}

struct HarmonicField {
    terms: Vec<(u32, i32, f64)>,
}

impl HarmonicField {
    fn draw(rng: &mut ChaCha8Rng, degrees: [u32; 2], amplitude: f64) -> HarmonicField {
        let mut terms = Vec::new();
        for l in degrees[0]..=degrees[1] {
            for m in -(l as i32)..=(l as i32) {
                let z: f64 = StandardNormal.sample(rng);
                terms.push((l, m, amplitude / l.max(1) as f64 * z));
            }
        }
        HarmonicField { terms }
    }

    fn eval(&self, dir: &Vector3<f64>) -> f64 {
        self.terms
            .iter()
            .map(|&(l, m, c)| c * real_harmonic(l, m, dir))
            .sum()
    }
}

impl PhantomSpec {
    pub fn with_seed(&self, seed: u64) -> PhantomSpec {
        PhantomSpec {
            seed,
            ..self.clone()
        }
    }

    /// Per-case specs of a population; case `i` gets a seed derived from `(seed, i)`.
    pub fn population(&self, n: usize, seed: u64) -> Vec<PhantomSpec> {
        (0..n as u64)
            .map(|i| self.with_seed(rng::derive_seed(seed, "phantom-case", &[i])))
            .collect()
    }

    pub fn grid(&self) -> Result<Grid> {
        let half = self.dims.map(|d| (d as f64 - 1.0) * 0.5 * self.spacing);
        Grid::new(self.dims, [self.spacing; 3], half.map(|h| -h))
    }

    fn validate_params(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.inner_radius > 0.0 && self.outer_radius > self.inner_radius) {
            return bad(format!(
                "radii must satisfy 0 < inner < outer, got {} and {}",
                self.inner_radius, self.outer_radius
            ));
        }
        if self.bump_degrees[0] > self.bump_degrees[1] {
            return bad(format!(
                "empty harmonic degree range {:?}",
                self.bump_degrees
            ));
        }
        let levels = [self.background, self.interior, self.ribbon];
        if levels.iter().any(|v| !v.is_finite())
            || levels[0] == levels[1]
            || levels[0] == levels[2]
            || levels[1] == levels[2]
        {
            return bad(format!(
                "intensity levels must be finite and distinct, got {levels:?}"
            ));
        }
        if !(self.noise_sigma >= 0.0)
            || !(0.0..1.0).contains(&self.bias_amplitude)
            || !(self.bias_wavelength > 0.0)
        {
            return bad(
                "noise sigma must be >= 0, bias amplitude in [0, 1), bias wavelength > 0".into(),
            );
        }
        if !(self.shape_amplitude >= 0.0 && self.thickness_amplitude >= 0.0) {
            return bad("bump amplitudes must be non-negative".into());
        }
        Ok(())
    }

    /// Inner and outer radius at each icosphere vertex direction.
    pub fn radii(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        self.validate_params()?;
        let sphere = TriMesh::icosphere(self.subdivision);
        let mut r = rng::stream(self.seed, "phantom-shape", &[]);
        let shape = HarmonicField::draw(&mut r, self.bump_degrees, self.shape_amplitude);
        let gap = HarmonicField::draw(&mut r, self.bump_degrees, self.thickness_amplitude);
        let mid = 0.5 * (self.inner_radius + self.outer_radius);
        let half = 0.5 * (self.outer_radius - self.inner_radius);
        let mut inner = Vec::with_capacity(sphere.vertex_count());
        let mut outer = Vec::with_capacity(sphere.vertex_count());
        for v in sphere.vertices() {
            let d = v.coords;
            let m = mid + shape.eval(&d);
            let h = half + 0.5 * gap.eval(&d);
            inner.push(m - h);
            outer.push(m + h);
        }
        if let Some(i) = (0..inner.len()).find(|&i| !(inner[i] > 0.0 && outer[i] > inner[i])) {
            return Err(Error::InvalidArgument(format!(
                "phantom surfaces cross at vertex {i}: inner {} outer {}",
                inner[i], outer[i]
            )));
        }
        let grid = self.grid()?;
        let limit = (0..3)
            .map(|a| (grid.dims[a] as f64 - 1.0) * 0.5 * grid.spacing[a] - grid.spacing[a])
            .fold(f64::INFINITY, f64::min);
        let reach = outer.iter().cloned().fold(0.0, f64::max);
        if reach > limit {
            return Err(Error::InvalidArgument(format!(
                "outer surface reaches radius {reach:.3}, grid interior only allows {limit:.3}"
            )));
        }
        Ok((inner, outer))
    }

    /// White and pial meshes; identical connectivity, radially displaced icosphere vertices.
    pub fn meshes(&self) -> Result<(TriMesh, TriMesh)> {
        let (inner, outer) = self.radii()?;
        let sphere = TriMesh::icosphere(self.subdivision);
        let place = |radii: &[f64]| -> Vec<Point3<f64>> {
            sphere
                .vertices()
                .iter()
                .zip(radii)
                .map(|(v, &r)| Point3::from(v.coords.normalize() * r))
                .collect()
        };
        Ok((
            sphere.with_vertices(place(&inner))?,
            sphere.with_vertices(place(&outer))?,
        ))
    }

    pub fn generate(&self) -> Result<Phantom> {
        let (white, pial) = self.meshes()?;
        let image = self.render(&white, &pial)?;
        Ok(Phantom { white, pial, image })
    }

    /// Piecewise-constant region image times a smooth bias field, plus noise.
    pub fn render(&self, white: &TriMesh, pial: &TriMesh) -> Result<Volume> {
        self.validate_params()?;
        let grid = self.grid()?;
        let s_p = SignedDistanceField::new(pial)?.sample_grid(grid);
        let s_w = SignedDistanceField::new(white)?.sample_grid(grid);
        let bias = self.bias_field(&grid);
        let mut noise = rng::stream(self.seed, "phantom-noise", &[]);
        let data = s_p
            .data()
            .iter()
            .zip(s_w.data())
            .zip(&bias)
            .map(|((&p, &w), &b)| {
                let level = self.region_level(p, w);
                let z: f64 = StandardNormal.sample(&mut noise);
                level * b + self.noise_sigma * z
            })
            .collect();
        Volume::new(grid, data)
    }

    /// Intensity level assigned by the same three-way rule as the fused cortex condition.
    pub fn region_level(&self, s_p: f64, s_w: f64) -> f64 {
        let (_, ribbon) = fuse_voxel(s_p, s_w);
        if ribbon > 0.0 {
            self.ribbon
        } else if s_p > 0.0 {
            self.background
        } else {
            self.interior
        }
    }

    /// Mean of three plane waves with random directions and phases, mapped into `1 ± amplitude`.
    pub fn bias_field(&self, grid: &Grid) -> Vec<f64> {
        let mut r = rng::stream(self.seed, "phantom-bias", &[]);
        let k = 2.0 * std::f64::consts::PI / self.bias_wavelength;
        let waves: Vec<(Vector3<f64>, f64)> = (0..3)
            .map(|_| {
                let d = loop {
                    let v = Vector3::new(
                        StandardNormal.sample(&mut r),
                        StandardNormal.sample(&mut r),
                        StandardNormal.sample(&mut r),
                    );
                    if v.norm() > 1e-6 {
                        break v.normalize();
                    }
                };
                (d * k, r.random_range(0.0..2.0 * std::f64::consts::PI))
            })
            .collect();
        (0..grid.len())
            .map(|i| {
                let p = Vector3::from(grid.center_of(i));
                let s: f64 = waves
                    .iter()
                    .map(|(w, ph)| (w.dot(&p) + ph).cos())
                    .sum::<f64>()
                    / 3.0;
                1.0 + self.bias_amplitude * s
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{cortical_thickness, fuse_cortex_sdf, sample_sdf_grid};

    #[test]
    fn harmonics_match_closed_forms() {
        let d = Vector3::new(0.3, -0.5, 0.8).normalize();
        let s3 = 3f64.sqrt();
        assert!((real_harmonic(0, 0, &d) - 1.0).abs() < 1e-14);
        assert!((real_harmonic(1, 0, &d) - s3 * d.z).abs() < 1e-14);
        assert!((real_harmonic(1, 1, &d) - s3 * d.x).abs() < 1e-14);
        assert!((real_harmonic(1, -1, &d) - s3 * d.y).abs() < 1e-14);
        let y20 = 5f64.sqrt() * 0.5 * (3.0 * d.z * d.z - 1.0);
        assert!((real_harmonic(2, 0, &d) - y20).abs() < 1e-14);
        let y22 = 15f64.sqrt() * 0.5 * (d.x * d.x - d.y * d.y);
        assert!((real_harmonic(2, 2, &d) - y22).abs() < 1e-13);
    }

    #[test]
    fn harmonics_have_unit_mean_square() {
        // Fibonacci-lattice quadrature
        let n = 20000;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        for (l, m) in [(3u32, -2i32), (4, 3), (4, 0)] {
            let mut acc = 0.0;
            for i in 0..n {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let rr = (1.0 - z * z).sqrt();
                let t = golden * i as f64;
                let y = real_harmonic(l, m, &Vector3::new(rr * t.cos(), rr * t.sin(), z));
                acc += y * y;
            }
            assert!(
                (acc / n as f64 - 1.0).abs() < 1e-3,
                "l={l} m={m}: {}",
                acc / n as f64
            );
        }
    }

    #[test]
    fn noise_free_image_matches_region_rule() {
        let spec = PhantomSpec {
            noise_sigma: 0.0,
            bias_amplitude: 0.0,
            subdivision: 2,
            dims: [24; 3],
            inner_radius: 6.0,
            outer_radius: 8.5,
            seed: 5,
            ..PhantomSpec::default()
        };
        let ph = spec.generate().unwrap();
        let grid = spec.grid().unwrap();
        let s_p = sample_sdf_grid(&ph.pial, grid).unwrap();
        let s_w = sample_sdf_grid(&ph.white, grid).unwrap();
        let (s_c, ribbon) = fuse_cortex_sdf(&s_p, &s_w).unwrap();
        let mut counts = [0usize; 3];
        for i in 0..grid.len() {
            let expected = if ribbon.data()[i] == 1.0 {
                counts[2] += 1;
                spec.ribbon
            } else if s_c.data()[i] > 0.0 {
                counts[0] += 1;
                spec.background
            } else {
                counts[1] += 1;
                spec.interior
            };
            assert_eq!(ph.image.data()[i], expected, "voxel {i}");
        }
        assert!(counts.iter().all(|&c| c > 0));
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = PhantomSpec {
            subdivision: 2,
            dims: [20; 3],
            seed: 11,
            inner_radius: 4.0,
            outer_radius: 6.0,
            shape_amplitude: 0.15,
            ..PhantomSpec::default()
        };
        let a = spec.generate().unwrap();
        let b = spec.generate().unwrap();
        assert_eq!(a.image.to_bytes(), b.image.to_bytes());
        assert_eq!(a.pial.to_obj_string(), b.pial.to_obj_string());
        let c = spec.with_seed(12).generate().unwrap();
        assert_ne!(a.image.to_bytes(), c.image.to_bytes());
    }

    #[test]
    fn pair_thickness_tracks_radial_gap() {
        let spec = PhantomSpec {
            seed: 3,
            ..PhantomSpec::default()
        };
        let (inner, outer) = spec.radii().unwrap();
        let (white, pial) = spec.meshes().unwrap();
        white.check_correspondence(&pial).unwrap();
        let t = cortical_thickness(&pial, &white).unwrap();
        let mut rel = 0.0;
        for i in 0..t.len() {
            let gap = outer[i] - inner[i];
            rel += (t[i] - gap).abs() / gap;
        }
        rel /= t.len() as f64;
        assert!(rel < 0.05, "mean relative thickness error {rel}");
    }

    #[test]
    fn invalid_specs_rejected() {
        let crossing = PhantomSpec {
            inner_radius: 9.0,
            outer_radius: 9.1,
            thickness_amplitude: 2.0,
            ..PhantomSpec::default()
        };
        assert!(crossing.generate().is_err());
        let inverted = PhantomSpec {
            inner_radius: 12.0,
            outer_radius: 11.0,
            ..PhantomSpec::default()
        };
        assert!(inverted.generate().is_err());
        let same_levels = PhantomSpec {
            ribbon: 0.7,
            ..PhantomSpec::default()
        };
        assert!(same_levels.generate().is_err());
        let too_big = PhantomSpec {
            outer_radius: 15.4,
            ..PhantomSpec::default()
        };
        assert!(too_big.generate().is_err());
    }

    #[test]
    fn default_population_is_valid() {
        for spec in PhantomSpec::default().population(200, 1) {
            spec.radii().unwrap();
        }
    }

    #[test]
    fn region_statistics_follow_levels() {
        let spec = PhantomSpec {
            bias_amplitude: 0.0,
            seed: 9,
            ..PhantomSpec::default()
        };
        let ph = spec.generate().unwrap();
        let grid = spec.grid().unwrap();
        let s_p = sample_sdf_grid(&ph.pial, grid).unwrap();
        let s_w = sample_sdf_grid(&ph.white, grid).unwrap();
        for level in [spec.background, spec.interior, spec.ribbon] {
            let vals: Vec<f64> = (0..grid.len())
                .filter(|&i| spec.region_level(s_p.data()[i], s_w.data()[i]) == level)
                .map(|i| ph.image.data()[i])
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let s2 = spec.noise_sigma.powi(2);
            assert!((mean - level).abs() < 3.0 * spec.noise_sigma / n.sqrt());
            // variance standard error for Gaussian samples: s2 * sqrt(2/(n-1))
            assert!((var - s2).abs() < 3.0 * s2 * (2.0 / (n - 1.0)).sqrt());
        }
    }
}
