//! Axis-aligned bounding-volume hierarchy over mesh triangles for
//! closest-point queries.

use nalgebra::{Point3, Vector3};

use super::mesh::TriMesh;

const LEAF_SIZE: usize = 4;

/// Which part of a triangle the closest point lies on. Vertex/edge indices are
/// local to the face: edge `i` joins corners `i` and `(i + 1) % 3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    Vertex(usize),
    Edge(usize),
    Face,
}

#[derive(Debug, Clone, Copy)]
pub struct ClosestPoint {
    pub face: usize,
    pub point: Point3<f64>,
    pub dist2: f64,
    pub feature: Feature,
}

impl ClosestPoint {
    pub fn distance(&self) -> f64 {
        self.dist2.sqrt()
    }
}

/// Closest point on triangle `abc` to `p` (Ericson, Real-Time Collision Detection 5.1.5),
/// with the Voronoi region it came from.
pub fn closest_point_on_triangle(
    p: &Point3<f64>,
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
) -> (Point3<f64>, Feature) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (*a, Feature::Vertex(0));
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (*b, Feature::Vertex(1));
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, Feature::Edge(0));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (*c, Feature::Vertex(2));
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, Feature::Edge(2));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, Feature::Edge(1));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, Feature::Face)
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: Point3<f64>,
    hi: Point3<f64>,
}

impl Aabb {
    fn empty() -> Self {
        Aabb {
            lo: Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
            hi: Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Point3<f64>) {
        for a in 0..3 {
            self.lo[a] = self.lo[a].min(p[a]);
            self.hi[a] = self.hi[a].max(p[a]);
        }
    }

    #[cfg(test)]
    fn merge(&mut self, o: &Aabb) {
        self.grow(&o.lo);
        self.grow(&o.hi);
    }

    fn dist2(&self, p: &Point3<f64>) -> f64 {
        let mut d = 0.0;
        for a in 0..3 {
            let v = if p[a] < self.lo[a] {
                self.lo[a] - p[a]
            } else if p[a] > self.hi[a] {
                p[a] - self.hi[a]
            } else {
                0.0
            };
            d += v * v;
        }
        d
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        bounds: Aabb,
        start: usize,
        count: usize,
    },
    Inner {
        bounds: Aabb,
        left: usize,
        right: usize,
    },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

/// Triangle BVH. Owns a copy of the triangle corners so queries need no mesh borrow.
#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<usize>,
    tris: Vec<[Point3<f64>; 3]>,
}

impl Bvh {
    pub fn build(mesh: &TriMesh) -> Self {
        let tris: Vec<[Point3<f64>; 3]> =
            (0..mesh.face_count()).map(|f| mesh.triangle(f)).collect();
        let centroids: Vec<Point3<f64>> = tris
            .iter()
            .map(|t| Point3::from((t[0].coords + t[1].coords + t[2].coords) / 3.0))
            .collect();
        let mut bvh = Bvh {
            nodes: Vec::with_capacity(2 * tris.len() / LEAF_SIZE + 1),
            order: (0..tris.len()).collect(),
            tris,
        };
        if !bvh.tris.is_empty() {
            bvh.build_node(0, bvh.order.len(), &centroids);
        }
        bvh
    }

    fn build_node(&mut self, start: usize, end: usize, centroids: &[Point3<f64>]) -> usize {
        let mut bounds = Aabb::empty();
        let mut cbounds = Aabb::empty();
        for &t in &self.order[start..end] {
            for v in &self.tris[t] {
                bounds.grow(v);
            }
            cbounds.grow(&centroids[t]);
        }
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf {
                bounds,
                start,
                count: end - start,
            });
            return id;
        }
        let extent: Vector3<f64> = cbounds.hi - cbounds.lo;
        let axis = if extent.x >= extent.y && extent.x >= extent.z {
            0
        } else if extent.y >= extent.z {
            1
        } else {
            2
        };
        let mid = (start + end) / 2;
        self.order[start..end].sort_by(|&a, &b| {
            centroids[a][axis]
                .total_cmp(&centroids[b][axis])
                .then(a.cmp(&b))
        });
        self.nodes.push(Node::Leaf {
            bounds,
            start,
            count: 0,
        });
        let left = self.build_node(start, mid, centroids);
        let right = self.build_node(mid, end, centroids);
        self.nodes[id] = Node::Inner {
            bounds,
            left,
            right,
        };
        id
    }

    pub fn is_empty(&self) -> bool {
        self.tris.is_empty()
    }

    /// Exact nearest triangle point. Ties are broken toward the lowest face index.
    pub fn closest(&self, p: &Point3<f64>) -> Option<ClosestPoint> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best: Option<ClosestPoint> = None;
        let mut best_d2 = f64::INFINITY;
        let mut stack: Vec<(usize, f64)> = Vec::with_capacity(64);
        stack.push((0, self.nodes[0].bounds().dist2(p)));
        while let Some((id, box_d2)) = stack.pop() {
            if box_d2 > best_d2 {
                continue;
            }
            match &self.nodes[id] {
                Node::Leaf { start, count, .. } => {
                    for &t in &self.order[*start..*start + *count] {
                        let [a, b, c] = &self.tris[t];
                        let (q, feature) = closest_point_on_triangle(p, a, b, c);
                        let d2 = (q - p).norm_squared();
                        let better = match &best {
                            None => true,
                            Some(cur) => d2 < cur.dist2 || (d2 == cur.dist2 && t < cur.face),
                        };
                        if better {
                            best_d2 = d2;
                            best = Some(ClosestPoint {
                                face: t,
                                point: q,
                                dist2: d2,
                                feature,
                            });
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    let dl = self.nodes[*left].bounds().dist2(p);
                    let dr = self.nodes[*right].bounds().dist2(p);
                    // push the farther child first so the nearer is explored first
                    if dl <= dr {
                        stack.push((*right, dr));
                        stack.push((*left, dl));
                    } else {
                        stack.push((*left, dl));
                        stack.push((*right, dr));
                    }
                }
            }
        }
        best
    }

    pub fn distance(&self, p: &Point3<f64>) -> f64 {
        self.closest(p).map_or(f64::INFINITY, |c| c.distance())
    }

    pub fn bounds(&self) -> Option<(Point3<f64>, Point3<f64>)> {
        self.nodes.first().map(|n| (n.bounds().lo, n.bounds().hi))
    }

    /// Merge of all leaf boxes; equals `bounds()` and exists for invariant tests.
    #[cfg(test)]
    fn leaf_union(&self) -> Aabb {
        let mut acc = Aabb::empty();
        for n in &self.nodes {
            if let Node::Leaf { bounds, count, .. } = n {
                if *count > 0 {
                    acc.merge(bounds);
                }
            }
        }
        acc
    }
}
