//! Signed distance to closed triangle meshes.
//!
//! Magnitude comes from the exact closest point (via [`Bvh`]); the sign from
//! the angle-weighted pseudonormal of the closest feature (face, edge or
//! vertex), which is exact for closed, consistently oriented meshes.
//! Negative inside, positive outside.

use std::collections::HashMap;

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;

use super::bvh::{Bvh, Feature};
use super::mesh::TriMesh;
use crate::error::Result;
use crate::volume::{Grid, Volume};

#[derive(Debug, Clone)]
pub struct SignedDistanceField {
    bvh: Bvh,
    faces: Vec<[usize; 3]>,
    face_normals: Vec<Vector3<f64>>,
    vertex_normals: Vec<Vector3<f64>>,
    edge_normals: HashMap<(usize, usize), Vector3<f64>>,
    /// -1 when the mesh winds clockwise seen from outside.
    orientation: f64,
}

impl SignedDistanceField {
    pub fn new(mesh: &TriMesh) -> Result<Self> {
        mesh.validate_closed()?;
        let face_normals = mesh.face_normals();
        let mut vertex_normals = vec![Vector3::zeros(); mesh.vertex_count()];
        let mut edge_normals: HashMap<(usize, usize), Vector3<f64>> = HashMap::new();
        for (f, face) in mesh.faces().iter().enumerate() {
            for corner in 0..3 {
                vertex_normals[face[corner]] += face_normals[f] * mesh.corner_angle(face, corner);
                let (a, b) = (face[corner], face[(corner + 1) % 3]);
                *edge_normals
                    .entry((a.min(b), a.max(b)))
                    .or_insert_with(Vector3::zeros) += face_normals[f];
            }
        }
        let orientation = if mesh.signed_volume() < 0.0 {
            -1.0
        } else {
            1.0
        };
        Ok(SignedDistanceField {
            bvh: Bvh::build(mesh),
            faces: mesh.faces().to_vec(),
            face_normals,
            vertex_normals,
            edge_normals,
            orientation,
        })
    }

    pub fn distance(&self, p: &Point3<f64>) -> f64 {
        let hit = match self.bvh.closest(p) {
            Some(hit) => hit,
            None => return f64::INFINITY,
        };
        if hit.dist2 == 0.0 {
            return 0.0;
        }
        let face = self.faces[hit.face];
        let normal = match hit.feature {
            Feature::Face => self.face_normals[hit.face],
            Feature::Vertex(c) => self.vertex_normals[face[c]],
            Feature::Edge(e) => {
                let (a, b) = (face[e], face[(e + 1) % 3]);
                self.edge_normals[&(a.min(b), a.max(b))]
            }
        };
        let side = (p - hit.point).dot(&normal) * self.orientation;
        let d = hit.distance();
        if side < 0.0 {
            -d
        } else {
            d
        }
    }

    pub fn unsigned_distance(&self, p: &Point3<f64>) -> f64 {
        self.bvh.distance(p)
    }

    /// Evaluate at every voxel center. Each voxel is independent, so the result does
    /// not depend on the worker count.
    pub fn sample_grid(&self, grid: Grid) -> Volume {
        let data: Vec<f64> = (0..grid.len())
            .into_par_iter()
            .map(|idx| self.distance(&Point3::from(grid.center_of(idx))))
            .collect();
        Volume::new(grid, data).expect("distances to a non-empty mesh are finite")
    }
}

pub fn signed_distance(mesh: &TriMesh, p: &Point3<f64>) -> Result<f64> {
    Ok(SignedDistanceField::new(mesh)?.distance(p))
}

pub fn sample_sdf_grid(mesh: &TriMesh, grid: Grid) -> Result<Volume> {
    Ok(SignedDistanceField::new(mesh)?.sample_grid(grid))
}
