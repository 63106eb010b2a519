//! Iso-surface extraction by marching tetrahedra over a Freudenthal
//! (six-tetrahedra-per-cube) split, which keeps neighboring cubes crack-free.

use std::collections::HashMap;

use nalgebra::Point3;

use super::mesh::{Face, TriMesh};
use crate::error::Result;
use crate::volume::Volume;

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const TETS: [[usize; 4]; 6] = [
    [0, 5, 1, 6],
    [0, 1, 2, 6],
    [0, 2, 3, 6],
    [0, 3, 7, 6],
    [0, 7, 4, 6],
    [0, 4, 5, 6],
];

/// Triangulated `{x : v(x) = level}`; voxels with `v > level` count as inside.
/// Vertices on shared lattice edges are welded.
pub fn extract_isosurface(volume: &Volume, level: f64) -> Result<TriMesh> {
    let grid = *volume.grid();
    let [nx, ny, nz] = grid.dims;
    let data = volume.data();
    let mut verts: Vec<Point3<f64>> = Vec::new();
    let mut edge_vertex: HashMap<(usize, usize), usize> = HashMap::new();
    let mut faces: Vec<Face> = Vec::new();

    let mut vertex_on = |a: usize, b: usize, verts: &mut Vec<Point3<f64>>| -> usize {
        let key = (a.min(b), a.max(b));
        *edge_vertex.entry(key).or_insert_with(|| {
            let (va, vb) = (data[key.0], data[key.1]);
            let t = ((level - va) / (vb - va)).clamp(0.0, 1.0);
            let pa = Point3::from(grid.center_of(key.0));
            let pb = Point3::from(grid.center_of(key.1));
            verts.push(pa + (pb - pa) * t);
            verts.len() - 1
        })
    };

    if nx < 2 || ny < 2 || nz < 2 {
        return TriMesh::from_soup(verts, faces);
    }
    for i in 0..nx - 1 {
        for j in 0..ny - 1 {
            for k in 0..nz - 1 {
                let ids = CORNERS.map(|c| grid.index(i + c[0], j + c[1], k + c[2]));
                let inside = ids.map(|id| data[id] > level);
                if inside.iter().all(|&b| b) || inside.iter().all(|&b| !b) {
                    continue;
                }
                for tet in TETS {
                    let t = tet.map(|c| ids[c]);
                    let flags = tet.map(|c| inside[c]);
                    let ins: Vec<usize> = (0..4).filter(|&q| flags[q]).map(|q| t[q]).collect();
                    let outs: Vec<usize> = (0..4).filter(|&q| !flags[q]).map(|q| t[q]).collect();
                    match ins.len() {
                        1 | 3 => {
                            let (lone, others) = if ins.len() == 1 {
                                (ins[0], &outs)
                            } else {
                                (outs[0], &ins)
                            };
                            let tri = [
                                vertex_on(lone, others[0], &mut verts),
                                vertex_on(lone, others[1], &mut verts),
                                vertex_on(lone, others[2], &mut verts),
                            ];
                            faces.push(tri);
                        }
                        2 => {
                            let ac = vertex_on(ins[0], outs[0], &mut verts);
                            let ad = vertex_on(ins[0], outs[1], &mut verts);
                            let bd = vertex_on(ins[1], outs[1], &mut verts);
                            let bc = vertex_on(ins[1], outs[0], &mut verts);
                            faces.push([ac, ad, bd]);
                            faces.push([ac, bd, bc]);
                        }
                        _ => {}
                    }
                }
            }
        }
    }
    TriMesh::from_soup(verts, faces)
}

/// Iso-surface of only the sub-`level` regions that do not reach the grid
/// border (26-connected), i.e. the boundary of cavities enclosed by a
/// super-`level` shell.
///
/// A shell brighter than its inside and its outside crosses `level` on both
/// faces; this keeps the inner crossing. Border-connected voxels are lifted
/// above `level`, so with 26-connectivity no tetrahedron edge ever joins a
/// lifted voxel to an enclosed one and the kept crossings are interpolated
/// exactly as in [`extract_isosurface`]. Empty if the shell leaks.
pub fn enclosed_isosurface(volume: &Volume, level: f64) -> Result<TriMesh> {
    let grid = *volume.grid();
    let [nx, ny, nz] = grid.dims;
    let below: Vec<bool> = volume.data().iter().map(|&v| !(v > level)).collect();
    let mut outside = vec![false; below.len()];
    let mut stack = Vec::new();
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let border =
                    i == 0 || j == 0 || k == 0 || i + 1 == nx || j + 1 == ny || k + 1 == nz;
                let id = grid.index(i, j, k);
                if border && below[id] && !outside[id] {
                    outside[id] = true;
                    stack.push([i, j, k]);
                }
            }
        }
    }
    while let Some([i, j, k]) = stack.pop() {
        for di in -1isize..=1 {
            for dj in -1isize..=1 {
                for dk in -1isize..=1 {
                    let (a, b, c) = (i as isize + di, j as isize + dj, k as isize + dk);
                    if a < 0
                        || b < 0
                        || c < 0
                        || a >= nx as isize
                        || b >= ny as isize
                        || c >= nz as isize
                    {
                        continue;
                    }
                    let q = [a as usize, b as usize, c as usize];
                    let id = grid.index(q[0], q[1], q[2]);
                    if below[id] && !outside[id] {
                        outside[id] = true;
                        stack.push(q);
                    }
                }
            }
        }
    }
    let lifted = volume
        .data()
        .iter()
        .map(|v| v.abs())
        .fold(level.abs(), f64::max)
        + 1.0;
    let data = volume
        .data()
        .iter()
        .zip(&outside)
        .map(|(&v, &o)| if o { lifted } else { v })
        .collect();
    extract_isosurface(&Volume::new(grid, data)?, level)
}

/// Components sorted by decreasing face count.
pub fn components_by_size(mesh: &TriMesh) -> Vec<TriMesh> {
    let mut parts = mesh.components();
    parts.sort_by(|a, b| b.face_count().cmp(&a.face_count()));
    parts
}
