//! Uniform (red) refinement and newest-vertex bisection.

use std::collections::{HashMap, HashSet};

use super::mesh::{MeshLevel, Point};

struct MidpointTable {
    map: HashMap<(usize, usize), usize>,
}

impl MidpointTable {
    fn new() -> Self {
        MidpointTable {
            map: HashMap::new(),
        }
    }

    fn get_or_insert(&mut self, mesh: &mut MeshLevel, a: usize, b: usize) -> usize {
        let key = (a.min(b), a.max(b));
        if let Some(&m) = self.map.get(&key) {
            return m;
        }
        let (p, q) = (mesh.vertices[a], mesh.vertices[b]);
        let mid: Point = [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])];
        let id = mesh.vertices.len();
        mesh.vertices.push(mid);
        mesh.vertex_parents.push(Some(key));
        mesh.boundary_flags.push(false);
        self.map.insert(key, id);
        id
    }
}

fn child_shell(m: &MeshLevel) -> MeshLevel {
    MeshLevel {
        vertices: m.vertices.clone(),
        triangles: Vec::new(),
        boundary_flags: m.boundary_flags.clone(),
        parent_of: Vec::new(),
        refinement_edge: Vec::new(),
        vertex_parents: m.vertex_parents.clone(),
        level: m.level + 1,
    }
}

/// Split every triangle into four congruent children through its edge midpoints.
pub fn refine_uniform(m: &MeshLevel) -> MeshLevel {
    let mut out = child_shell(m);
    let mut mids = MidpointTable::new();
    for (t, &[v0, v1, v2]) in m.triangles.iter().enumerate() {
        let m01 = mids.get_or_insert(&mut out, v0, v1);
        let m12 = mids.get_or_insert(&mut out, v1, v2);
        let m20 = mids.get_or_insert(&mut out, v2, v0);
        for child in [
            [v0, m01, m20],
            [m01, v1, m12],
            [m20, m12, v2],
            [m01, m12, m20],
        ] {
            out.triangles.push(child);
            out.parent_of.push(Some(t));
            out.refinement_edge.push(0);
        }
    }
    for t in 0..out.triangles.len() {
        out.refinement_edge[t] = out.longest_edge_peak(t);
    }
    out.boundary_flags = out.topological_boundary();
    out
}

fn ref_edge(tri: [usize; 3], r: u8) -> (usize, usize) {
    let r = r as usize;
    let (a, b) = (tri[(r + 1) % 3], tri[(r + 2) % 3]);
    (a.min(b), a.max(b))
}

/// Newest-vertex bisection of the marked triangles with conforming closure.
pub fn refine_bisection(m: &MeshLevel, marked: &[usize]) -> MeshLevel {
    if marked.is_empty() {
        return m.clone();
    }
    let mut split: HashSet<(usize, usize)> = marked
        .iter()
        .map(|&t| ref_edge(m.triangles[t], m.refinement_edge[t]))
        .collect();
    // closure: a triangle with any split edge must also split its refinement edge
    loop {
        let mut grew = false;
        for (t, tri) in m.triangles.iter().enumerate() {
            let re = ref_edge(*tri, m.refinement_edge[t]);
            if split.contains(&re) {
                continue;
            }
            let touched = (0..3).any(|i| {
                let (a, b) = (tri[(i + 1) % 3], tri[(i + 2) % 3]);
                split.contains(&(a.min(b), a.max(b)))
            });
            if touched {
                split.insert(re);
                grew = true;
            }
        }
        if !grew {
            break;
        }
    }

    let mut out = child_shell(m);
    let mut mids = MidpointTable::new();
    for (t, &tri) in m.triangles.iter().enumerate() {
        bisect_into(&mut out, &mut mids, &split, t, tri, m.refinement_edge[t]);
    }
    out.boundary_flags = out.topological_boundary();
    out
}

fn bisect_into(
    out: &mut MeshLevel,
    mids: &mut MidpointTable,
    split: &HashSet<(usize, usize)>,
    parent: usize,
    tri: [usize; 3],
    r: u8,
) {
    if !split.contains(&ref_edge(tri, r)) {
        out.triangles.push(tri);
        out.parent_of.push(Some(parent));
        out.refinement_edge.push(r);
        return;
    }
    let ri = r as usize;
    let (p, a, b) = (tri[ri], tri[(ri + 1) % 3], tri[(ri + 2) % 3]);
    let mid = mids.get_or_insert(out, a, b);
    bisect_into(out, mids, split, parent, [p, a, mid], 2);
    bisect_into(out, mids, split, parent, [p, mid, b], 1);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::mesh::{build_lshape_mesh, build_unit_square_mesh};

    fn coord_set(m: &MeshLevel) -> Vec<(i64, i64)> {
        let mut v: Vec<(i64, i64)> = m
            .vertices
            .iter()
            .map(|p| {
                (
                    (p[0] * 1024.0).round() as i64,
                    (p[1] * 1024.0).round() as i64,
                )
            })
            .collect();
        v.sort();
        v
    }

    #[test]
    fn uniform_refinement_quadruples_and_nests() {
        let m = build_unit_square_mesh(2).unwrap();
        let f = refine_uniform(&m);
        assert_eq!(f.num_triangles(), 4 * m.num_triangles());
        assert_eq!(&f.vertices[..m.num_vertices()], &m.vertices[..]);
        f.check_conformity().unwrap();
        let ff = refine_uniform(&f);
        assert_eq!(
            coord_set(&ff),
            coord_set(&build_unit_square_mesh(8).unwrap())
        );
        assert_eq!(ff.num_interior(), 49);
        assert_eq!(ff.level, 2);
    }

    #[test]
    fn empty_marking_is_identity() {
        let m = build_lshape_mesh(2).unwrap();
        assert_eq!(refine_bisection(&m, &[]), m);
    }

    #[test]
    fn full_marking_bisects_everything() {
        let m = build_lshape_mesh(2).unwrap();
        let all: Vec<usize> = (0..m.num_triangles()).collect();
        let f = refine_bisection(&m, &all);
        f.check_conformity().unwrap();
        let mut children = vec![0; m.num_triangles()];
        for p in f.parent_of.iter().flatten() {
            children[*p] += 1;
        }
        assert!(children.iter().all(|&c| c >= 2));
        assert!((f.total_area() - 3.0).abs() < 1e-14);
    }

    #[test]
    fn single_mark_closure_is_conforming() {
        let mut m = build_lshape_mesh(2).unwrap();
        let a0 = m.min_angle();
        for round in 0..8 {
            let corner = (0..m.num_triangles())
                .find(|&t| m.triangles[t].iter().any(|&v| m.vertices[v] == [0.0, 0.0]))
                .unwrap();
            m = refine_bisection(&m, &[corner]);
            m.check_conformity().unwrap();
            assert!((m.total_area() - 3.0).abs() < 1e-13, "round {round}");
            assert!(m.min_angle() >= a0 / 2.0 - 1e-12);
        }
    }
}
