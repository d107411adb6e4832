//! Triangle-mesh queries: inside tests and x-axis ray crossings.
//!
//! Crossings are collected with a bounding-volume hierarchy over the triangles'
//! (y, z) footprints, so each ray cast along +x visits only the faces whose
//! projection can contain the ray.

use std::collections::HashMap;

use crate::geometry::{Vec2, Vec3};

const LEAF_SIZE: usize = 4;
/// Deterministic offset applied to ray origins so rays avoid shared edges and vertices.
const RAY_JITTER: (f64, f64) = (3.1e-10, 7.3e-10);

#[derive(Debug, Clone)]
struct Node {
    min: Vec2,
    max: Vec2,
    /// Leaf: `[start, end)` into `order`. Inner: child indices.
    kind: NodeKind,
}

#[derive(Debug, Clone)]
enum NodeKind {
    Leaf(usize, usize),
    Inner(usize, usize),
}

/// A posed triangle mesh with a (y, z) BVH.
#[derive(Debug, Clone)]
pub struct MeshIndex {
    vertices: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
    nodes: Vec<Node>,
    order: Vec<usize>,
    closed: bool,
}

#[inline]
fn yz(p: &Vec3) -> Vec2 {
    Vec2::new(p.y, p.z)
}

#[inline]
fn cross2(a: &Vec2, b: &Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

/// True when every undirected edge is used exactly twice with opposite directions.
pub fn is_closed(faces: &[[u32; 3]]) -> bool {
    let mut edges: HashMap<(u32, u32), i32> = HashMap::new();
    for f in faces {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            let (key, s) = if a < b { ((a, b), 1) } else { ((b, a), -1) };
            let e = edges.entry(key).or_insert(0);
            *e += s * 8 + 1;
        }
    }
    // each edge needs one use per direction: counts 9 + (-7) = 2
    !faces.is_empty() && edges.values().all(|&v| v == 2)
}

impl MeshIndex {
    pub fn new(vertices: Vec<Vec3>, faces: &[[u32; 3]]) -> Self {
        let closed = is_closed(faces);
        let mut idx = Self {
            vertices,
            faces: faces.to_vec(),
            nodes: Vec::new(),
            order: (0..faces.len()).collect(),
            closed,
        };
        if !faces.is_empty() {
            let boxes: Vec<(Vec2, Vec2)> = (0..faces.len()).map(|f| idx.face_box(f)).collect();
            idx.build(&boxes, 0, faces.len());
        }
        idx
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    fn tri(&self, f: usize) -> [Vec3; 3] {
        self.faces[f].map(|i| self.vertices[i as usize])
    }

    fn face_box(&self, f: usize) -> (Vec2, Vec2) {
        let t = self.tri(f);
        let mut lo = yz(&t[0]);
        let mut hi = lo;
        for p in &t[1..] {
            lo = lo.inf(&yz(p));
            hi = hi.sup(&yz(p));
        }
        (lo, hi)
    }

    fn build(&mut self, boxes: &[(Vec2, Vec2)], start: usize, end: usize) -> usize {
        let mut lo = Vec2::repeat(f64::INFINITY);
        let mut hi = Vec2::repeat(f64::NEG_INFINITY);
        for &f in &self.order[start..end] {
            lo = lo.inf(&boxes[f].0);
            hi = hi.sup(&boxes[f].1);
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            min: lo,
            max: hi,
            kind: NodeKind::Leaf(start, end),
        });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let axis = if hi.x - lo.x >= hi.y - lo.y { 0 } else { 1 };
        let center = |f: usize| (boxes[f].0[axis] + boxes[f].1[axis]) * 0.5;
        let mid = (start + end) / 2;
        self.order[start..end].sort_by(|&a, &b| center(a).total_cmp(&center(b)).then(a.cmp(&b)));
        let left = self.build(boxes, start, mid);
        let right = self.build(boxes, mid, end);
        self.nodes[id].kind = NodeKind::Inner(left, right);
        id
    }

    /// Signed crossings of the line `{(x, y, z) : x ∈ ℝ}` with the surface, sorted by x.
    ///
    /// The sign is +1 where the surface normal has positive x (the line leaves an
    /// outward-oriented solid) and −1 where it enters.
    pub fn crossings_along_x(&self, y: f64, z: f64) -> Vec<(f64, i32)> {
        let q = Vec2::new(y + RAY_JITTER.0, z + RAY_JITTER.1);
        let mut out = Vec::new();
        if self.nodes.is_empty() {
            return out;
        }
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if q.x < node.min.x || q.x > node.max.x || q.y < node.min.y || q.y > node.max.y {
                continue;
            }
            match node.kind {
                NodeKind::Inner(l, r) => {
                    stack.push(r);
                    stack.push(l);
                }
                NodeKind::Leaf(s, e) => {
                    for &f in &self.order[s..e] {
                        if let Some(hit) = self.hit(f, &q) {
                            out.push(hit);
                        }
                    }
                }
            }
        }
        out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out
    }

    fn hit(&self, f: usize, q: &Vec2) -> Option<(f64, i32)> {
        let [a, b, c] = self.tri(f);
        let (a2, b2, c2) = (yz(&a), yz(&b), yz(&c));
        let d = cross2(&(b2 - a2), &(c2 - a2));
        if d == 0.0 {
            return None;
        }
        let e0 = cross2(&(b2 - a2), &(q - a2));
        let e1 = cross2(&(c2 - b2), &(q - b2));
        let e2 = cross2(&(a2 - c2), &(q - c2));
        let inside = if d > 0.0 {
            e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0
        } else {
            e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0
        };
        if !inside {
            return None;
        }
        let x = (e1 * a.x + e2 * b.x + e0 * c.x) / d;
        Some((x, if d > 0.0 { 1 } else { -1 }))
    }

    /// Winding number of `p`; nonzero means inside a closed mesh.
    pub fn winding_number(&self, p: &Vec3) -> i32 {
        self.crossings_along_x(p.y, p.z)
            .iter()
            .filter(|(x, _)| *x > p.x)
            .map(|(_, s)| s)
            .sum()
    }

    /// Strict inside test. Open meshes use the closest face's normal instead of ray parity.
    pub fn contains(&self, p: &Vec3) -> bool {
        if self.closed {
            self.winding_number(p) != 0
        } else {
            self.closest_face_side(p) < 0.0
        }
    }

    /// `(p − q)·n` for the closest point `q` on any face and that face's unit normal.
    pub fn closest_face_side(&self, p: &Vec3) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for f in 0..self.faces.len() {
            let [a, b, c] = self.tri(f);
            let q = closest_point_on_triangle(p, &a, &b, &c);
            let d2 = (p - q).norm_squared();
            if d2 < best.0 {
                let n = (b - a).cross(&(c - a));
                let len = n.norm();
                let side = if len > 0.0 { (p - q).dot(&n) / len } else { 0.0 };
                best = (d2, side);
            }
        }
        best.1
    }

    /// x-intervals where the line at (y, z) lies inside the mesh.
    pub fn inside_intervals(&self, y: f64, z: f64) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        let mut w = 0;
        let mut start = 0.0;
        for (x, s) in self.crossings_along_x(y, z) {
            let before = w;
            w -= s;
            if before == 0 && w != 0 {
                start = x;
            } else if before != 0 && w == 0 {
                out.push((start, x));
            }
        }
        out
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }
}

/// Closest point to `p` on triangle `abc` (region-based, handles all Voronoi cases).
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

/// Axis-aligned unit cube `[0, 1]³` with outward faces; used in tests and examples.
pub fn unit_cube() -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let v: Vec<Vec3> = (0..8)
        .map(|i| Vec3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64))
        .collect();
    let f = vec![
        [0, 2, 1],
        [1, 2, 3],
        [4, 5, 6],
        [5, 7, 6],
        [0, 1, 4],
        [1, 5, 4],
        [2, 6, 3],
        [3, 6, 7],
        [0, 4, 2],
        [2, 4, 6],
        [1, 3, 5],
        [3, 7, 5],
    ];
    (v, f)
}
