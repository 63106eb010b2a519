//! Indexed triangle meshes, the OBJ subset reader/writer and the `.thick` sidecar.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Point3, Vector3};

use crate::error::{Error, Result};

pub type Face = [usize; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Point3<f64>>,
    faces: Vec<Face>,
    thickness: Option<Vec<f64>>,
}

impl TriMesh {
    /// Validates face indices and rejects zero-area faces.
    pub fn new(vertices: Vec<Point3<f64>>, faces: Vec<Face>) -> Result<Self> {
        if let Some(pos) = vertices
            .iter()
            .position(|v| !v.coords.iter().all(|c| c.is_finite()))
        {
            return Err(Error::InvalidArgument(format!(
                "vertex {pos} is not finite"
            )));
        }
        let mesh = TriMesh {
            vertices,
            faces,
            thickness: None,
        };
        for (fi, f) in mesh.faces.iter().enumerate() {
            if let Some(&bad) = f.iter().find(|&&i| i >= mesh.vertices.len()) {
                return Err(Error::IndexOutOfRange {
                    line: 0,
                    index: bad as i64,
                    count: mesh.vertices.len(),
                });
            }
            if !(mesh.face_area(fi) > 0.0) {
                return Err(Error::DegenerateFace { face: fi });
            }
        }
        Ok(mesh)
    }

    /// Like [`TriMesh::new`] but silently drops zero-area faces (iso-surface output).
    pub fn from_soup(vertices: Vec<Point3<f64>>, faces: Vec<Face>) -> Result<Self> {
        let keep: Vec<Face> = faces
            .into_iter()
            .filter(|f| {
                f.iter().all(|&i| i < vertices.len())
                    && triangle_area(&vertices[f[0]], &vertices[f[1]], &vertices[f[2]]) > 0.0
            })
            .collect();
        TriMesh::new(vertices, keep)
    }

    pub fn with_thickness(mut self, thickness: Vec<f64>) -> Result<Self> {
        if thickness.len() != self.vertices.len() {
            return Err(Error::Correspondence(format!(
                "thickness has {} entries for {} vertices",
                thickness.len(),
                self.vertices.len()
            )));
        }
        if thickness.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("non-finite thickness".into()));
        }
        self.thickness = Some(thickness);
        Ok(self)
    }

    pub fn without_thickness(mut self) -> Self {
        self.thickness = None;
        self
    }

    pub fn vertices(&self) -> &[Point3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    pub fn thickness(&self) -> Option<&[f64]> {
        self.thickness.as_deref()
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Same vertex count and same face list: the correspondence contract.
    pub fn check_correspondence(&self, other: &TriMesh) -> Result<()> {
        if self.vertices.len() != other.vertices.len() {
            return Err(Error::Correspondence(format!(
                "vertex counts differ: {} vs {}",
                self.vertices.len(),
                other.vertices.len()
            )));
        }
        if self.faces != other.faces {
            return Err(Error::Correspondence("face connectivity differs".into()));
        }
        Ok(())
    }

    /// Replace vertex positions, keeping connectivity. Drops the thickness channel.
    pub fn with_vertices(&self, vertices: Vec<Point3<f64>>) -> Result<TriMesh> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::Correspondence(format!(
                "expected {} vertices, got {}",
                self.vertices.len(),
                vertices.len()
            )));
        }
        TriMesh::new(vertices, self.faces.clone())
    }

    pub fn triangle(&self, face: usize) -> [Point3<f64>; 3] {
        let [a, b, c] = self.faces[face];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn face_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.triangle(face);
        triangle_area(&a, &b, &c)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Unit normals following the right-hand rule on face winding.
    pub fn face_normals(&self) -> Vec<Vector3<f64>> {
        (0..self.faces.len())
            .map(|f| {
                let [a, b, c] = self.triangle(f);
                (b - a).cross(&(c - a)).normalize()
            })
            .collect()
    }

    /// Angle-weighted vertex normals (unit length).
    pub fn vertex_normals(&self) -> Vec<Vector3<f64>> {
        let face_normals = self.face_normals();
        let mut acc = vec![Vector3::zeros(); self.vertices.len()];
        for (f, face) in self.faces.iter().enumerate() {
            for corner in 0..3 {
                let angle = self.corner_angle(face, corner);
                acc[face[corner]] += face_normals[f] * angle;
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

    pub(crate) fn corner_angle(&self, face: &Face, corner: usize) -> f64 {
        let p = self.vertices[face[corner]];
        let u = self.vertices[face[(corner + 1) % 3]] - p;
        let v = self.vertices[face[(corner + 2) % 3]] - p;
        u.angle(&v)
    }

    /// Enclosed volume; positive when faces wind counter-clockwise seen from outside.
    pub fn signed_volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|&[a, b, c]| {
                let (a, b, c) = (
                    self.vertices[a].coords,
                    self.vertices[b].coords,
                    self.vertices[c].coords,
                );
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    /// Closed and consistently oriented: every directed edge occurs exactly once
    /// and its reverse occurs exactly once.
    pub fn validate_closed(&self) -> Result<()> {
        let mut directed: HashMap<(usize, usize), usize> =
            HashMap::with_capacity(self.faces.len() * 3);
        for face in &self.faces {
            for e in 0..3 {
                let key = (face[e], face[(e + 1) % 3]);
                *directed.entry(key).or_insert(0) += 1;
            }
        }
        let mut keys: Vec<_> = directed.keys().copied().collect();
        keys.sort_unstable();
        for (a, b) in keys {
            let count = directed[&(a, b)];
            if count > 1 {
                return Err(Error::Topology(
                    a.min(b),
                    a.max(b),
                    format!("directed edge used by {count} faces (non-manifold or inconsistent orientation)"),
                ));
            }
            match directed.get(&(b, a)) {
                Some(1) => {}
                Some(_) => unreachable!("counts > 1 rejected above"),
                None => {
                    return Err(Error::Topology(
                        a.min(b),
                        a.max(b),
                        "boundary edge (mesh is not closed)".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    pub fn bounding_box(&self) -> (Point3<f64>, Point3<f64>) {
        let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        (lo, hi)
    }

    pub fn map_vertices(&self, f: impl Fn(&Point3<f64>) -> Point3<f64>) -> Result<TriMesh> {
        let mut out = self.with_vertices(self.vertices.iter().map(f).collect())?;
        out.thickness = self.thickness.clone();
        Ok(out)
    }

    /// Split into vertex-connected components, ordered by their smallest face index.
    pub fn components(&self) -> Vec<TriMesh> {
        let n = self.vertices.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for f in &self.faces {
            for e in 0..2 {
                let (ra, rb) = (find(&mut parent, f[e]), find(&mut parent, f[e + 1]));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
        let mut order: Vec<usize> = Vec::new();
        let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
        for (fi, f) in self.faces.iter().enumerate() {
            let root = find(&mut parent, f[0]);
            groups
                .entry(root)
                .or_insert_with(|| {
                    order.push(root);
                    Vec::new()
                })
                .push(fi);
        }
        order
            .into_iter()
            .map(|root| {
                let mut remap = HashMap::new();
                let mut verts = Vec::new();
                let faces = groups[&root]
                    .iter()
                    .map(|&fi| {
                        self.faces[fi].map(|v| {
                            *remap.entry(v).or_insert_with(|| {
                                verts.push(self.vertices[v]);
                                verts.len() - 1
                            })
                        })
                    })
                    .collect();
                TriMesh {
                    vertices: verts,
                    faces,
                    thickness: None,
                }
            })
            .collect()
    }

    /// Unit icosphere: icosahedron subdivided `level` times, vertices projected to the sphere.
    /// Level 3 yields 642 vertices and 1280 faces.
    pub fn icosphere(level: u32) -> TriMesh {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut vertices: Vec<Point3<f64>> = [
            [-1.0, t, 0.0],
            [1.0, t, 0.0],
            [-1.0, -t, 0.0],
            [1.0, -t, 0.0],
            [0.0, -1.0, t],
            [0.0, 1.0, t],
            [0.0, -1.0, -t],
            [0.0, 1.0, -t],
            [t, 0.0, -1.0],
            [t, 0.0, 1.0],
            [-t, 0.0, -1.0],
            [-t, 0.0, 1.0],
        ]
        .iter()
        .map(|c| Point3::from(Vector3::from(*c).normalize()))
        .collect();
        let mut faces: Vec<Face> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..level {
            let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
            let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Point3<f64>>| -> usize {
                *midpoints.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    let m = (verts[a].coords + verts[b].coords).normalize();
                    verts.push(Point3::from(m));
                    verts.len() - 1
                })
            };
            let mut next = Vec::with_capacity(faces.len() * 4);
            for &[a, b, c] in &faces {
                let ab = midpoint(a, b, &mut vertices);
                let bc = midpoint(b, c, &mut vertices);
                let ca = midpoint(c, a, &mut vertices);
                next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            faces = next;
        }
        TriMesh {
            vertices,
            faces,
            thickness: None,
        }
    }

    pub fn to_obj_string(&self) -> String {
        let mut s = String::with_capacity(self.vertices.len() * 40 + self.faces.len() * 20);
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
        }
        for f in &self.faces {
            let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        s
    }

    pub fn parse_obj(text: &str) -> Result<TriMesh> {
        let mut vertices = Vec::new();
        let mut raw_faces: Vec<(usize, [i64; 3])> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line_no = lineno + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let tag = parts.next().unwrap_or_default();
            let fields: Vec<&str> = parts.collect();
            let parse_err = |message: String| Error::Parse {
                line: line_no,
                message,
            };
            match tag {
                "v" => {
                    if fields.len() != 3 {
                        return Err(parse_err(format!(
                            "vertex line needs 3 coordinates, got {}",
                            fields.len()
                        )));
                    }
                    let mut c = [0.0; 3];
                    for (dst, src) in c.iter_mut().zip(&fields) {
                        *dst = src
                            .parse::<f64>()
                            .map_err(|_| parse_err(format!("bad coordinate {src:?}")))?;
                    }
                    vertices.push(Point3::from(c));
                }
                "f" => {
                    if fields.len() != 3 {
                        return Err(parse_err(format!(
                            "only triangles are supported, got {} indices",
                            fields.len()
                        )));
                    }
                    let mut idx = [0i64; 3];
                    for (dst, src) in idx.iter_mut().zip(&fields) {
                        *dst = src
                            .parse::<i64>()
                            .map_err(|_| parse_err(format!("bad face index {src:?}")))?;
                    }
                    raw_faces.push((line_no, idx));
                }
                other => return Err(parse_err(format!("unsupported record {other:?}"))),
            }
        }
        let count = vertices.len();
        let mut faces = Vec::with_capacity(raw_faces.len());
        for (line, idx) in raw_faces {
            let mut f = [0usize; 3];
            for (dst, &i) in f.iter_mut().zip(&idx) {
                if i < 1 || i as usize > count {
                    return Err(Error::IndexOutOfRange {
                        line,
                        index: i,
                        count,
                    });
                }
                *dst = (i - 1) as usize;
            }
            faces.push(f);
        }
        TriMesh::new(vertices, faces)
    }

    pub fn to_thick_string(&self) -> Option<String> {
        self.thickness.as_ref().map(|t| {
            let mut s = String::with_capacity(t.len() * 20);
            for v in t {
                let _ = writeln!(s, "{v}");
            }
            s
        })
    }
}

fn triangle_area(a: &Point3<f64>, b: &Point3<f64>, c: &Point3<f64>) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

pub fn thick_path(obj: &Path) -> PathBuf {
    obj.with_extension("thick")
}

/// Read an OBJ-subset mesh and, when present, its `.thick` sidecar.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriMesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mesh = TriMesh::parse_obj(&text)?;
    let sidecar = thick_path(path);
    if sidecar.exists() {
        let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let values = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                l.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line: i + 1,
                    message: format!("bad thickness value {l:?} in {}", sidecar.display()),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        return mesh.with_thickness(values);
    }
    Ok(mesh)
}

/// Load a mesh that will be used for signed distance; it must be closed and oriented.
pub fn load_closed_mesh(path: impl AsRef<Path>) -> Result<TriMesh> {
    let mesh = load_mesh(path)?;
    mesh.validate_closed()?;
    Ok(mesh)
}

pub fn save_mesh(mesh: &TriMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, mesh.to_obj_string()).map_err(|e| Error::io(path, e))?;
    if let Some(t) = mesh.to_thick_string() {
        let sidecar = thick_path(path);
        std::fs::write(&sidecar, t).map_err(|e| Error::io(&sidecar, e))?;
    }
    Ok(())
}
