//! PCA shape model over midthickness geometry plus vertex-wise thickness, with
//! spherical latent interpolation and Mahalanobis typicality.
//!
//! Samples are flattened as `[x_0..x_V, y_0..y_V, z_0..z_V, t_0..t_V]`.

use std::path::Path;

use nalgebra::{DMatrix, Point3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::mesh::{Face, TriMesh};

pub const MODEL_MAGIC: &[u8; 4] = b"C2PC";
pub const MODEL_VERSION: u32 = 1;
/// Flattening-order tag stored in the model file.
pub const FLATTEN_XYZT_PLANAR: u8 = 0;

pub fn flatten(sample: &TriMesh) -> Result<Vec<f64>> {
    let t = sample
        .thickness()
        .ok_or_else(|| Error::InvalidArgument("shape sample needs a thickness channel".into()))?;
    let v = sample.vertex_count();
    let mut out = Vec::with_capacity(4 * v);
    for axis in 0..3 {
        out.extend(sample.vertices().iter().map(|p| p[axis]));
    }
    out.extend_from_slice(t);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    vertex_count: usize,
    faces: Vec<Face>,
    mean: Vec<f64>,
    /// `k` rows of length `4V`, orthonormal.
    basis: Vec<Vec<f64>>,
    variances: Vec<f64>,
    total_variance: f64,
}

/// Latent coordinates (component scores).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPoint(pub Vec<f64>);

impl LatentPoint {
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl PcaModel {
    /// Fit `k` components by thin SVD of the centered data matrix.
    pub fn fit(samples: &[TriMesh], k: usize) -> Result<PcaModel> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "PCA needs at least 2 samples, got {n}"
            )));
        }
        let reference = &samples[0];
        for (i, s) in samples.iter().enumerate().skip(1) {
            reference
                .check_correspondence(s)
                .map_err(|e| Error::Correspondence(format!("sample {i}: {e}")))?;
        }
        let rows: Vec<Vec<f64>> = samples.iter().map(flatten).collect::<Result<_>>()?;
        let dim = rows[0].len();
        if k == 0 || k > (n - 1).min(dim) {
            return Err(Error::InvalidArgument(format!(
                "k must be in [1, {}], got {k}",
                (n - 1).min(dim)
            )));
        }
        let mut mean = vec![0.0; dim];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let centered = DMatrix::from_fn(n, dim, |i, j| rows[i][j] - mean[j]);
        let total_variance = centered.iter().map(|v| v * v).sum::<f64>() / (n - 1) as f64;
        let svd = centered.svd(false, true);
        let v_t = svd.v_t.expect("requested right singular vectors");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| {
            svd.singular_values[b]
                .total_cmp(&svd.singular_values[a])
                .then(a.cmp(&b))
        });
        let mut basis = Vec::with_capacity(k);
        let mut variances = Vec::with_capacity(k);
        for &c in order.iter().take(k) {
            let mut row: Vec<f64> = v_t.row(c).iter().copied().collect();
            // sign convention: largest-magnitude entry positive
            let (imax, _) = row
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |(bi, bv), (i, &v)| {
                    if v.abs() > bv {
                        (i, v.abs())
                    } else {
                        (bi, bv)
                    }
                });
            if row[imax] < 0.0 {
                row.iter_mut().for_each(|v| *v = -*v);
            }
            basis.push(row);
            let s = svd.singular_values[c];
            variances.push(s * s / (n - 1) as f64);
        }
        Ok(PcaModel {
            vertex_count: reference.vertex_count(),
            faces: reference.faces().to_vec(),
            mean,
            basis,
            variances,
            total_variance,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn components(&self) -> usize {
        self.basis.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn basis(&self) -> &[Vec<f64>] {
        &self.basis
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    /// Fraction of the training variance captured by each retained component.
    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        self.variances
            .iter()
            .map(|v| {
                if self.total_variance > 0.0 {
                    v / self.total_variance
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Smallest number of leading components whose cumulative explained ratio reaches `fraction`.
    pub fn components_for(&self, fraction: f64) -> usize {
        let mut acc = 0.0;
        for (i, r) in self.explained_variance_ratio().iter().enumerate() {
            acc += r;
            if acc >= fraction {
                return i + 1;
            }
        }
        self.components()
    }

    /// Keep only the first `k` components.
    pub fn truncated(&self, k: usize) -> Result<PcaModel> {
        if k == 0 || k > self.components() {
            return Err(Error::InvalidArgument(format!(
                "cannot truncate to {k} components"
            )));
        }
        let mut m = self.clone();
        m.basis.truncate(k);
        m.variances.truncate(k);
        Ok(m)
    }

    fn check_sample(&self, sample: &TriMesh) -> Result<Vec<f64>> {
        if sample.vertex_count() != self.vertex_count || sample.faces() != self.faces.as_slice() {
            return Err(Error::Correspondence(
                "sample does not match the model topology".into(),
            ));
        }
        flatten(sample)
    }

    pub fn embed_flat(&self, x: &[f64]) -> Result<LatentPoint> {
        if x.len() != self.mean.len() {
            return Err(Error::InvalidArgument(format!(
                "sample vector has {} entries, model expects {}",
                x.len(),
                self.mean.len()
            )));
        }
        Ok(LatentPoint(
            self.basis
                .iter()
                .map(|row| {
                    row.iter()
                        .zip(x)
                        .zip(&self.mean)
                        .map(|((b, v), m)| b * (v - m))
                        .sum()
                })
                .collect(),
        ))
    }

    pub fn embed(&self, sample: &TriMesh) -> Result<LatentPoint> {
        let x = self.check_sample(sample)?;
        self.embed_flat(&x)
    }

    pub fn invert_flat(&self, e: &LatentPoint) -> Result<Vec<f64>> {
        if e.dim() != self.components() {
            return Err(Error::InvalidArgument(format!(
                "latent has {} entries, model has {} components",
                e.dim(),
                self.components()
            )));
        }
        let mut x = self.mean.clone();
        for (row, &c) in self.basis.iter().zip(&e.0) {
            for (xi, b) in x.iter_mut().zip(row) {
                *xi += c * b;
            }
        }
        Ok(x)
    }

    /// Midthickness mesh with thickness channel, on the model's reference topology.
    pub fn invert(&self, e: &LatentPoint) -> Result<TriMesh> {
        let x = self.invert_flat(e)?;
        let v = self.vertex_count;
        let verts = (0..v)
            .map(|i| Point3::new(x[i], x[v + i], x[2 * v + i]))
            .collect();
        TriMesh::new(verts, self.faces.clone())?.with_thickness(x[3 * v..].to_vec())
    }

    /// `sqrt(sum e_i^2 / var_i)` over components with nonzero variance.
    pub fn mahalanobis(&self, e: &LatentPoint) -> Result<f64> {
        if e.dim() != self.components() {
            return Err(Error::InvalidArgument(format!(
                "latent has {} entries, model has {} components",
                e.dim(),
                self.components()
            )));
        }
        let vmax = self.variances.iter().cloned().fold(0.0, f64::max);
        let floor = vmax * 1e-12;
        Ok(e.0
            .iter()
            .zip(&self.variances)
            .filter(|(_, &v)| v > floor)
            .map(|(x, v)| x * x / v)
            .sum::<f64>()
            .sqrt())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.vertex_count as u32).to_le_bytes());
        out.extend_from_slice(&(self.components() as u32).to_le_bytes());
        out.push(FLATTEN_XYZT_PLANAR);
        out.extend_from_slice(&self.total_variance.to_le_bytes());
        for v in self
            .mean
            .iter()
            .chain(&self.variances)
            .chain(self.basis.iter().flatten())
        {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.faces.len() as u32).to_le_bytes());
        for f in &self.faces {
            for &i in f {
                out.extend_from_slice(&(i as u32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<PcaModel> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MODEL_MAGIC {
            return Err(Error::Format("bad shape-model magic".into()));
        }
        let version = cur.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "unsupported shape-model version {version}"
            )));
        }
        let v = cur.u32()? as usize;
        let k = cur.u32()? as usize;
        let tag = cur.take(1)?[0];
        if tag != FLATTEN_XYZT_PLANAR {
            return Err(Error::Format(format!("unknown flattening order {tag}")));
        }
        let total_variance = cur.f64()?;
        let dim = 4 * v;
        let mean = cur.f64s(dim)?;
        let variances = cur.f64s(k)?;
        let basis = (0..k).map(|_| cur.f64s(dim)).collect::<Result<Vec<_>>>()?;
        let nf = cur.u32()? as usize;
        let mut faces = Vec::with_capacity(nf);
        for _ in 0..nf {
            let f = [
                cur.u32()? as usize,
                cur.u32()? as usize,
                cur.u32()? as usize,
            ];
            if f.iter().any(|&i| i >= v) {
                return Err(Error::Format(
                    "face index out of range in shape model".into(),
                ));
            }
            faces.push(f);
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format("trailing bytes in shape model".into()));
        }
        Ok(PcaModel {
            vertex_count: v,
            faces,
            mean,
            basis,
            variances,
            total_variance,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PcaModel> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        PcaModel::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format("truncated shape model".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlerpRadius {
    /// `r = ||e1||` for every `phi`.
    #[default]
    First,
    /// `r(phi) = (1 - phi) ||e1|| + phi ||e2||`.
    Interpolated,
}

/// Great-circle interpolation between the directions of `e1` and `e2`, scaled to radius `r`.
pub fn slerp_sample(
    e1: &LatentPoint,
    e2: &LatentPoint,
    phi: f64,
    radius: SlerpRadius,
) -> Result<LatentPoint> {
    if e1.dim() != e2.dim() {
        return Err(Error::InvalidArgument("latent dimensions differ".into()));
    }
    if !(0.0..=1.0).contains(&phi) {
        return Err(Error::InvalidArgument(format!(
            "phi must be in [0, 1], got {phi}"
        )));
    }
    let (n1, n2) = (e1.norm(), e2.norm());
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::InvalidArgument(
            "slerp endpoints must be nonzero".into(),
        ));
    }
    let r = match radius {
        SlerpRadius::First => n1,
        SlerpRadius::Interpolated => (1.0 - phi) * n1 + phi * n2,
    };
    if phi == 0.0 && radius == SlerpRadius::First {
        return Ok(e1.clone());
    }
    let u1: Vec<f64> = e1.0.iter().map(|v| v / n1).collect();
    let u2: Vec<f64> = e2.0.iter().map(|v| v / n2).collect();
    let cos = u1
        .iter()
        .zip(&u2)
        .map(|(a, b)| a * b)
        .sum::<f64>()
        .clamp(-1.0, 1.0);
    let beta = cos.acos();
    if beta < 1e-6 {
        return Ok(LatentPoint(u1.iter().map(|v| r * v).collect()));
    }
    if std::f64::consts::PI - beta < 1e-6 {
        return Err(Error::InvalidArgument(
            "antipodal endpoints: slerp path is undefined".into(),
        ));
    }
    let s = beta.sin();
    let c1 = ((1.0 - phi) * beta).sin() / s;
    let c2 = (phi * beta).sin() / s;
    Ok(LatentPoint(
        u1.iter()
            .zip(&u2)
            .map(|(a, b)| r * (c1 * a + c2 * b))
            .collect(),
    ))
}

pub fn lerp_sample(e1: &LatentPoint, e2: &LatentPoint, phi: f64) -> Result<LatentPoint> {
    if e1.dim() != e2.dim() {
        return Err(Error::InvalidArgument("latent dimensions differ".into()));
    }
    Ok(LatentPoint(
        e1.0.iter()
            .zip(&e2.0)
            .map(|(a, b)| (1.0 - phi) * a + phi * b)
            .collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub retained: Vec<usize>,
    pub dropped: Vec<usize>,
}

/// Drop samples with any component score beyond `threshold` in magnitude.
pub fn outlier_filter(
    model: &PcaModel,
    samples: &[TriMesh],
    threshold: f64,
) -> Result<FilterOutcome> {
    let mut out = FilterOutcome {
        retained: Vec::new(),
        dropped: Vec::new(),
    };
    for (i, s) in samples.iter().enumerate() {
        let e = model.embed(s)?;
        if e.0.iter().any(|v| v.abs() > threshold) {
            out.dropped.push(i);
        } else {
            out.retained.push(i);
        }
    }
    Ok(out)
}
