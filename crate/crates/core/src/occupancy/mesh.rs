//! Watertight triangle meshes and a ray-parity inside/outside test.

use std::collections::HashMap;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::Aabb;
use crate::render::camera::{cross, dot};

type V3 = [f64; 3];

/// Barycentric distance to an edge below which a hit is re-cast.
const EDGE_TOL: f64 = 1e-9;
/// Hits closer than this to the query point mean it lies on the surface.
const SURFACE_TOL: f64 = 1e-12;
const LEAF_SIZE: usize = 4;
const RETRIES: usize = 8;

#[inline]
fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[derive(Clone, Debug)]
struct Node {
    lo: V3,
    hi: V3,
    /// Leaf: first triangle in `order`; interior: left child.
    first: u32,
    /// Leaf triangle count, 0 for interior nodes.
    count: u32,
    right: u32,
}

/// Closed, consistently oriented triangle mesh.
#[derive(Clone, Debug)]
pub struct TriangleMesh {
    vertices: Vec<V3>,
    triangles: Vec<[u32; 3]>,
    aabb: Aabb,
    nodes: Vec<Node>,
    order: Vec<u32>,
}

/// Outcome of casting one parity ray.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parity {
    Crossings(usize),
    /// The query point lies on the surface.
    OnSurface,
    /// A hit too close to an edge or vertex to count reliably.
    Ambiguous,
}

impl TriangleMesh {
    /// Validates the mesh: indices in range, no zero-area triangles, and
    /// every directed edge matched by exactly one opposite edge.
    pub fn new(vertices: Vec<V3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        if triangles.is_empty() {
            return Err(Error::Validation("mesh has no triangles".into()));
        }
        if vertices.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Validation("mesh has non-finite vertex coordinates".into()));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        let diag2: f64 = (0..3).map(|a| (hi[a] - lo[a]).powi(2)).sum();
        let mut edges: HashMap<(u32, u32), u32> = HashMap::with_capacity(triangles.len() * 3);
        for (i, t) in triangles.iter().enumerate() {
            if t.iter().any(|&k| k as usize >= vertices.len()) {
                return Err(Error::Validation(format!("triangle {i} has an out-of-range index")));
            }
            let [a, b, c] = t.map(|k| vertices[k as usize]);
            let n = cross(sub(b, a), sub(c, a));
            if dot(n, n).sqrt() <= 1e-12 * diag2 {
                return Err(Error::Validation(format!("triangle {i} is degenerate")));
            }
            for (p, q) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                *edges.entry((p, q)).or_insert(0) += 1;
            }
        }
        for (&(p, q), &n) in &edges {
            if n != 1 || edges.get(&(q, p)) != Some(&1) {
                return Err(Error::Validation(format!(
                    "edge {p}-{q} is not shared by exactly two consistently oriented triangles"
                )));
            }
        }
        let aabb = Aabb::new(lo.to_vec(), hi.to_vec())?;
        let mut mesh = TriangleMesh {
            vertices,
            triangles,
            aabb,
            nodes: Vec::new(),
            order: Vec::new(),
        };
        mesh.build_bvh();
        Ok(mesh)
    }

    pub fn vertices(&self) -> &[V3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    /// Tight bounding box of the vertices.
    pub fn aabb(&self) -> &Aabb {
        &self.aabb
    }

    /// Enclosed volume; positive when triangles wind counter-clockwise seen
    /// from outside.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|k| self.vertices[k as usize]);
                dot(a, cross(b, c)) / 6.0
            })
            .sum()
    }

    /// Geodesic sphere: a subdivided icosahedron projected onto the sphere.
    pub fn icosphere(center: V3, radius: f64, subdivisions: u32) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::invalid(format!("sphere radius must be positive, got {radius}")));
        }
        let p = (1.0 + 5f64.sqrt()) / 2.0;
        let mut verts: Vec<V3> = vec![
            [-1.0, p, 0.0],
            [1.0, p, 0.0],
            [-1.0, -p, 0.0],
            [1.0, -p, 0.0],
            [0.0, -1.0, p],
            [0.0, 1.0, p],
            [0.0, -1.0, -p],
            [0.0, 1.0, -p],
            [p, 0.0, -1.0],
            [p, 0.0, 1.0],
            [-p, 0.0, -1.0],
            [-p, 0.0, 1.0],
        ];
        let mut tris: Vec<[u32; 3]> = vec![
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
        let unit = |v: V3| {
            let n = dot(v, v).sqrt();
            v.map(|c| c / n)
        };
        for v in verts.iter_mut() {
            *v = unit(*v);
        }
        for _ in 0..subdivisions {
            let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
            let mut next = Vec::with_capacity(tris.len() * 4);
            let mut midpoint = |a: u32, b: u32, verts: &mut Vec<V3>| -> u32 {
                let key = (a.min(b), a.max(b));
                *mid.entry(key).or_insert_with(|| {
                    let (va, vb) = (verts[a as usize], verts[b as usize]);
                    verts.push(unit([(va[0] + vb[0]) / 2.0, (va[1] + vb[1]) / 2.0, (va[2] + vb[2]) / 2.0]));
                    (verts.len() - 1) as u32
                })
            };
            for [a, b, c] in tris {
                let ab = midpoint(a, b, &mut verts);
                let bc = midpoint(b, c, &mut verts);
                let ca = midpoint(c, a, &mut verts);
                next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            tris = next;
        }
        let verts = verts
            .into_iter()
            .map(|v| [0, 1, 2].map(|a| center[a] + radius * v[a]))
            .collect();
        TriangleMesh::new(verts, tris)
    }

    /// Axis-aligned box with outward-facing triangles.
    pub fn cuboid(min: V3, max: V3) -> Result<Self> {
        let v = |i: usize| {
            [
                if i & 1 == 0 { min[0] } else { max[0] },
                if i & 2 == 0 { min[1] } else { max[1] },
                if i & 4 == 0 { min[2] } else { max[2] },
            ]
        };
        let verts = (0..8).map(v).collect();
        let quads: [[u32; 4]; 6] = [
            [0, 2, 3, 1], // z-
            [4, 5, 7, 6], // z+
            [0, 1, 5, 4], // y-
            [2, 6, 7, 3], // y+
            [0, 4, 6, 2], // x-
            [1, 3, 7, 5], // x+
        ];
        let tris = quads
            .iter()
            .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
            .collect();
        TriangleMesh::new(verts, tris)
    }

    /// Torus around the y axis with tube radius `minor`.
    pub fn torus(major: f64, minor: f64, rings: usize, sides: usize) -> Result<Self> {
        if !(major > minor && minor > 0.0) || rings < 3 || sides < 3 {
            return Err(Error::invalid("torus needs major > minor > 0 and at least 3 rings and sides"));
        }
        let tau = std::f64::consts::TAU;
        let mut verts = Vec::with_capacity(rings * sides);
        for i in 0..rings {
            let u = tau * i as f64 / rings as f64;
            for j in 0..sides {
                let v = tau * j as f64 / sides as f64;
                let r = major + minor * v.cos();
                verts.push([r * u.cos(), minor * v.sin(), r * u.sin()]);
            }
        }
        let idx = |i: usize, j: usize| ((i % rings) * sides + j % sides) as u32;
        let mut tris = Vec::with_capacity(rings * sides * 2);
        for i in 0..rings {
            for j in 0..sides {
                let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
                tris.push([a, c, b]);
                tris.push([a, d, c]);
            }
        }
        TriangleMesh::new(verts, tris)
    }

    fn tri_bounds(&self, t: u32) -> (V3, V3) {
        let [a, b, c] = self.triangles[t as usize].map(|k| self.vertices[k as usize]);
        let lo = [0, 1, 2].map(|i| a[i].min(b[i]).min(c[i]));
        let hi = [0, 1, 2].map(|i| a[i].max(b[i]).max(c[i]));
        (lo, hi)
    }

    fn build_bvh(&mut self) {
        let n = self.triangles.len();
        let mut order: Vec<u32> = (0..n as u32).collect();
        let centroids: Vec<V3> = (0..n as u32)
            .map(|t| {
                let (lo, hi) = self.tri_bounds(t);
                [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a]))
            })
            .collect();
        let mut nodes = Vec::with_capacity(2 * n / LEAF_SIZE + 1);
        self.build_node(&mut nodes, &mut order, 0, n, &centroids);
        self.nodes = nodes;
        self.order = order;
    }

    fn build_node(&self, nodes: &mut Vec<Node>, order: &mut [u32], start: usize, end: usize, centroids: &[V3]) -> usize {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &t in &order[start..end] {
            let (a, b) = self.tri_bounds(t);
            for k in 0..3 {
                lo[k] = lo[k].min(a[k]);
                hi[k] = hi[k].max(b[k]);
            }
        }
        let id = nodes.len();
        nodes.push(Node {
            lo,
            hi,
            first: start as u32,
            count: (end - start) as u32,
            right: 0,
        });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        let mid = (start + end) / 2;
        order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            centroids[a as usize][axis].total_cmp(&centroids[b as usize][axis])
        });
        let left = self.build_node(nodes, order, start, mid, centroids);
        let right = self.build_node(nodes, order, mid, end, centroids);
        nodes[id].first = left as u32;
        nodes[id].right = right as u32;
        nodes[id].count = 0;
        id
    }

    /// Counts surface crossings along the ray `origin + t * dir`, `t > 0`.
    pub fn parity_along(&self, origin: V3, dir: V3) -> Parity {
        let inv = dir.map(|d| 1.0 / d);
        let mut crossings = 0;
        let mut ambiguous = false;
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if !slab_hit(origin, inv, node.lo, node.hi) {
                continue;
            }
            if node.count == 0 {
                stack.push(node.first as usize);
                stack.push(node.right as usize);
                continue;
            }
            let first = node.first as usize;
            for &t in &self.order[first..first + node.count as usize] {
                let [a, b, c] = self.triangles[t as usize].map(|k| self.vertices[k as usize]);
                match ray_triangle(origin, dir, a, b, c) {
                    Hit::Miss => {}
                    Hit::Cross => crossings += 1,
                    Hit::Surface => return Parity::OnSurface,
                    Hit::Ambiguous => ambiguous = true,
                }
            }
        }
        if ambiguous {
            Parity::Ambiguous
        } else {
            Parity::Crossings(crossings)
        }
    }
}

#[inline]
fn slab_hit(origin: V3, inv: V3, lo: V3, hi: V3) -> bool {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let mut ta = (lo[a] - origin[a]) * inv[a];
        let mut tb = (hi[a] - origin[a]) * inv[a];
        if ta.is_nan() || tb.is_nan() {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return false;
            }
            continue;
        }
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    t0 <= t1
}

enum Hit {
    Miss,
    Cross,
    Surface,
    Ambiguous,
}

#[inline]
fn ray_triangle(origin: V3, dir: V3, a: V3, b: V3, c: V3) -> Hit {
    let e1 = sub(b, a);
    let e2 = sub(c, a);
    let p = cross(dir, e2);
    let det = dot(e1, p);
    let scale = dot(e1, e1).sqrt() * dot(e2, e2).sqrt();
    if det.abs() <= 1e-14 * scale {
        return Hit::Miss;
    }
    let inv = 1.0 / det;
    let s = sub(origin, a);
    let u = dot(s, p) * inv;
    let q = cross(s, e1);
    let v = dot(dir, q) * inv;
    let w = 1.0 - u - v;
    let m = u.min(v).min(w);
    if m < -EDGE_TOL {
        return Hit::Miss;
    }
    let t = dot(e2, q) * inv;
    if t.abs() <= SURFACE_TOL {
        return Hit::Surface;
    }
    if t < 0.0 {
        return Hit::Miss;
    }
    if m <= EDGE_TOL {
        return Hit::Ambiguous;
    }
    Hit::Cross
}

/// Fixed pseudo-random cast directions: the first is used for every query,
/// the rest for retries.
pub fn parity_directions() -> &'static [V3; RETRIES + 1] {
    static DIRS: OnceLock<[V3; RETRIES + 1]> = OnceLock::new();
    DIRS.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x1ce_ba11);
        [(); RETRIES + 1].map(|_| {
            let z: f64 = rng.gen_range(-1.0..1.0);
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = (1.0 - z * z).sqrt();
            [r * phi.cos(), r * phi.sin(), z]
        })
    })
}

/// True when `x` is strictly inside `mesh`. Points on the surface count as
/// outside.
pub fn point_in_mesh(mesh: &TriangleMesh, x: V3) -> Result<bool> {
    if !mesh.aabb.contains(&x) {
        return Ok(false);
    }
    for &dir in parity_directions() {
        match mesh.parity_along(x, dir) {
            Parity::Crossings(n) => return Ok(n % 2 == 1),
            Parity::OnSurface => return Ok(false),
            Parity::Ambiguous => continue,
        }
    }
    Err(Error::NumericalDegeneracy(format!(
        "inside/outside test at {x:?} stayed ambiguous after {RETRIES} retries"
    )))
}
