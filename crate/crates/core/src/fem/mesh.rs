//! Triangular meshes with refinement ancestry.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{PaseError, Result};

pub type Point = [f64; 2];

/// A conforming triangulation at one level of a refinement hierarchy.
///
/// Triangles are stored counter-clockwise. `refinement_edge[t]` is the local
/// index of the vertex opposite the edge that bisection splits. Vertices
/// created by refinement record the endpoints of the edge they bisect in
/// `vertex_parents`; vertices of the root mesh have none. Vertex numbering of a
/// parent level is always a prefix of the child level.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshLevel {
    pub vertices: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
    pub boundary_flags: Vec<bool>,
    pub parent_of: Vec<Option<usize>>,
    pub refinement_edge: Vec<u8>,
    pub vertex_parents: Vec<Option<(usize, usize)>>,
    pub level: usize,
}

/// An edge with its one or two incident triangles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub v: [usize; 2],
    pub left: usize,
    pub right: Option<usize>,
}

impl MeshLevel {
    /// Root mesh from raw tables; boundary flags are derived from topology.
    pub fn from_tables(vertices: Vec<Point>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let nt = triangles.len();
        let nv = vertices.len();
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= nv) {
                return Err(PaseError::Mesh(format!(
                    "triangle {t} references a missing vertex"
                )));
            }
        }
        let mut m = MeshLevel {
            vertex_parents: vec![None; nv],
            boundary_flags: vec![false; nv],
            refinement_edge: vec![0; nt],
            parent_of: vec![None; nt],
            vertices,
            triangles,
            level: 0,
        };
        for t in 0..nt {
            if m.signed_area(t) <= 0.0 {
                return Err(PaseError::Mesh(format!(
                    "triangle {t} has nonpositive area"
                )));
            }
            m.refinement_edge[t] = m.longest_edge_peak(t);
        }
        m.boundary_flags = m.topological_boundary();
        Ok(m)
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn num_interior(&self) -> usize {
        self.boundary_flags.iter().filter(|b| !**b).count()
    }

    pub fn corners(&self, t: usize) -> [Point; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn signed_area(&self, t: usize) -> f64 {
        let [p, q, r] = self.corners(t);
        0.5 * ((q[0] - p[0]) * (r[1] - p[1]) - (r[0] - p[0]) * (q[1] - p[1]))
    }

    pub fn total_area(&self) -> f64 {
        (0..self.num_triangles()).map(|t| self.signed_area(t)).sum()
    }

    /// Longest edge length of triangle `t`.
    pub fn diameter(&self, t: usize) -> f64 {
        let c = self.corners(t);
        (0..3)
            .map(|i| dist(c[(i + 1) % 3], c[(i + 2) % 3]))
            .fold(0.0, f64::max)
    }

    /// Smallest interior angle of triangle `t`, in radians.
    pub fn min_angle_of(&self, t: usize) -> f64 {
        let c = self.corners(t);
        (0..3)
            .map(|i| {
                let (p, q, r) = (c[i], c[(i + 1) % 3], c[(i + 2) % 3]);
                let u = [q[0] - p[0], q[1] - p[1]];
                let v = [r[0] - p[0], r[1] - p[1]];
                let cos = (u[0] * v[0] + u[1] * v[1]) / (dist(p, q) * dist(p, r));
                cos.clamp(-1.0, 1.0).acos()
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn min_angle(&self) -> f64 {
        (0..self.num_triangles())
            .map(|t| self.min_angle_of(t))
            .fold(f64::INFINITY, f64::min)
    }

    /// Local index of the vertex opposite the longest edge (first on ties).
    pub(crate) fn longest_edge_peak(&self, t: usize) -> u8 {
        let c = self.corners(t);
        let mut best = 0;
        let mut len = -1.0;
        for i in 0..3 {
            let l = dist(c[(i + 1) % 3], c[(i + 2) % 3]);
            if l > len * (1.0 + 1e-12) {
                best = i;
                len = l;
            }
        }
        best as u8
    }

    /// All edges, sorted by vertex pair.
    pub fn edges(&self) -> Vec<Edge> {
        let mut map: HashMap<(usize, usize), Edge> = HashMap::new();
        for (t, tri) in self.triangles.iter().enumerate() {
            for i in 0..3 {
                let (a, b) = (tri[(i + 1) % 3], tri[(i + 2) % 3]);
                let key = (a.min(b), a.max(b));
                map.entry(key)
                    .and_modify(|e| e.right = Some(t))
                    .or_insert(Edge {
                        v: [key.0, key.1],
                        left: t,
                        right: None,
                    });
            }
        }
        let mut edges: Vec<Edge> = map.into_values().collect();
        edges.sort_by_key(|e| (e.v[0], e.v[1]));
        edges
    }

    fn edge_counts(&self) -> HashMap<(usize, usize), usize> {
        let mut map = HashMap::new();
        for tri in &self.triangles {
            for i in 0..3 {
                let (a, b) = (tri[(i + 1) % 3], tri[(i + 2) % 3]);
                *map.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        map
    }

    pub(crate) fn topological_boundary(&self) -> Vec<bool> {
        let mut flags = vec![false; self.num_vertices()];
        for ((a, b), c) in self.edge_counts() {
            if c == 1 {
                flags[a] = true;
                flags[b] = true;
            }
        }
        flags
    }

    /// Checks orientation, edge multiplicity and the absence of hanging nodes.
    pub fn check_conformity(&self) -> Result<()> {
        for t in 0..self.num_triangles() {
            if self.signed_area(t) <= 0.0 {
                return Err(PaseError::Mesh(format!(
                    "triangle {t} has nonpositive area"
                )));
            }
        }
        let counts = self.edge_counts();
        let mut single: HashMap<usize, Vec<usize>> = HashMap::new();
        for (&(a, b), &c) in &counts {
            if c > 2 {
                return Err(PaseError::Mesh(format!(
                    "edge ({a},{b}) shared by {c} triangles"
                )));
            }
            if c == 1 {
                single.entry(a).or_default().push(b);
                single.entry(b).or_default().push(a);
            }
        }
        // a hanging node m on (a,b) shows up as three single-owner edges a-b, a-m, m-b
        for (&(a, b), &c) in &counts {
            if c != 1 {
                continue;
            }
            for &m in single.get(&a).into_iter().flatten() {
                if m == b || !single.get(&m).is_some_and(|n| n.contains(&b)) {
                    continue;
                }
                let (pa, pb, pm) = (self.vertices[a], self.vertices[b], self.vertices[m]);
                let cross = (pb[0] - pa[0]) * (pm[1] - pa[1]) - (pb[1] - pa[1]) * (pm[0] - pa[0]);
                if cross.abs() <= 1e-12 * dist(pa, pb).powi(2) {
                    return Err(PaseError::Mesh(format!(
                        "hanging node {m} on edge ({a},{b})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Plain-text dump: `v x y` lines, `t i j k` lines and one `f` line of
    /// boundary flags.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in &self.vertices {
            let _ = writeln!(s, "v {:.17e} {:.17e}", p[0], p[1]);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "t {} {} {}", t[0], t[1], t[2]);
        }
        s.push('f');
        for &b in &self.boundary_flags {
            s.push_str(if b { " 1" } else { " 0" });
        }
        s.push('\n');
        s
    }
}

pub(crate) fn dist(p: Point, q: Point) -> f64 {
    (p[0] - q[0]).hypot(p[1] - q[1])
}

/// Structured mesh of the unit square with `n` cells per side, each cell cut by
/// its lower-left to upper-right diagonal.
pub fn build_unit_square_mesh(n: usize) -> Result<MeshLevel> {
    if n == 0 {
        return Err(PaseError::InvalidArgument(
            "unit square mesh needs n >= 1".into(),
        ));
    }
    let h = 1.0 / n as f64;
    let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            vertices.push([i as f64 * h, j as f64 * h]);
        }
    }
    let id = |i: usize, j: usize| j * (n + 1) + i;
    let mut triangles = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            push_cell(
                &mut triangles,
                id(i, j),
                id(i + 1, j),
                id(i, j + 1),
                id(i + 1, j + 1),
            );
        }
    }
    MeshLevel::from_tables(vertices, triangles)
}

/// Structured mesh of `(-1,1)² \ [0,1]²` with spacing `1/n`.
pub fn build_lshape_mesh(n: usize) -> Result<MeshLevel> {
    if n == 0 || n % 2 != 0 {
        return Err(PaseError::InvalidArgument(
            "L-shape mesh needs an even n >= 2".into(),
        ));
    }
    let m = 2 * n;
    let h = 1.0 / n as f64;
    let coord = |k: usize| -1.0 + k as f64 * h;
    let mut index = vec![usize::MAX; (m + 1) * (m + 1)];
    let mut vertices = Vec::new();
    for j in 0..=m {
        for i in 0..=m {
            if i > n && j > n {
                continue;
            }
            index[j * (m + 1) + i] = vertices.len();
            vertices.push([coord(i), coord(j)]);
        }
    }
    let id = |i: usize, j: usize| index[j * (m + 1) + i];
    let mut triangles = Vec::new();
    for j in 0..m {
        for i in 0..m {
            if i >= n && j >= n {
                continue;
            }
            push_cell(
                &mut triangles,
                id(i, j),
                id(i + 1, j),
                id(i, j + 1),
                id(i + 1, j + 1),
            );
        }
    }
    MeshLevel::from_tables(vertices, triangles)
}

fn push_cell(tris: &mut Vec<[usize; 3]>, v00: usize, v10: usize, v01: usize, v11: usize) {
    tris.push([v00, v10, v11]);
    tris.push([v00, v11, v01]);
}
