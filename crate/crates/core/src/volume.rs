//! Dense scalar volumes and the `C2VX` binary container.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 4] = b"C2VX";
pub const VOLUME_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Sampling lattice shared by volumes: voxel `(i, j, k)` is centered at
/// `origin + spacing * (i, j, k)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "grid dims must be positive, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "grid spacing must be finite and positive, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "grid origin must be finite, got {origin:?}"
            )));
        }
        Ok(Grid {
            dims,
            spacing,
            origin,
        })
    }

    /// Isotropic grid of `n³` voxels centered on the world origin.
    pub fn centered_cube(n: usize, spacing: f64) -> Result<Self> {
        let half = (n as f64 - 1.0) * 0.5 * spacing;
        Grid::new([n; 3], [spacing; 3], [-half; 3])
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn unravel(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.dims[2];
        let j = (idx / self.dims[2]) % self.dims[1];
        let i = idx / (self.dims[1] * self.dims[2]);
        [i, j, k]
    }

    #[inline]
    pub fn center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + self.spacing[0] * i as f64,
            self.origin[1] + self.spacing[1] * j as f64,
            self.origin[2] + self.spacing[2] * k as f64,
        ]
    }

    pub fn center_of(&self, idx: usize) -> [f64; 3] {
        let [i, j, k] = self.unravel(idx);
        self.center(i, j, k)
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::Geometry(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                grid.dims
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite value at voxel {pos}"
            )));
        }
        Ok(Volume { grid, data })
    }

    pub fn filled(grid: Grid, value: f64) -> Self {
        Volume {
            grid,
            data: vec![value; grid.len()],
        }
    }

    pub fn zeros(grid: Grid) -> Self {
        Volume::filled(grid, 0.0)
    }

    /// Build from a per-voxel function of the voxel center.
    pub fn from_fn(grid: Grid, f: impl Fn([f64; 3]) -> f64) -> Self {
        let data = (0..grid.len()).map(|idx| f(grid.center_of(idx))).collect();
        Volume { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn same_geometry(&self, other: &Volume) -> bool {
        self.grid == other.grid
    }

    pub fn check_geometry(&self, other: &Volume) -> Result<()> {
        if self.same_geometry(other) {
            Ok(())
        } else {
            Err(Error::Geometry(format!(
                "volumes differ: {:?} vs {:?}",
                self.grid, other.grid
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Volume {
        Volume {
            grid: self.grid,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Volume, f: impl Fn(f64, f64) -> f64) -> Result<Volume> {
        self.check_geometry(other)?;
        Ok(Volume {
            grid: self.grid,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Round every voxel through `f32`, i.e. the value the container would store.
    pub fn quantized(&self) -> Volume {
        self.map(|v| v as f32 as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 + 12 + 48 + 1 + 4 * self.data.len());
        out.extend_from_slice(VOLUME_MAGIC);
        out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
        for d in self.grid.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for s in self.grid.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for o in self.grid.origin {
            out.extend_from_slice(&o.to_le_bytes());
        }
        out.push(DTYPE_F32);
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Volume> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != VOLUME_MAGIC {
            return Err(Error::Format(format!("bad volume magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != VOLUME_VERSION {
            return Err(Error::Format(format!(
                "unsupported volume version {version}"
            )));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = read_u32(&mut r)? as usize;
        }
        let mut spacing = [0.0; 3];
        for s in &mut spacing {
            *s = read_f64(&mut r)?;
        }
        let mut origin = [0.0; 3];
        for o in &mut origin {
            *o = read_f64(&mut r)?;
        }
        let mut dtype = [0u8; 1];
        read_exact(&mut r, &mut dtype)?;
        if dtype[0] != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype tag {}", dtype[0])));
        }
        let grid = Grid::new(dims, spacing, origin)?;
        if r.len() != 4 * grid.len() {
            return Err(Error::Format(format!(
                "payload has {} bytes, expected {}",
                r.len(),
                4 * grid.len()
            )));
        }
        let data = r
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Volume::new(grid, data)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Volume> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Volume::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("truncated volume header".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut &[u8]) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}
