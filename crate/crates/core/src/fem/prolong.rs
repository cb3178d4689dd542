//! Coarse-to-fine interpolation between nested P1 spaces.

use super::space::FeSpace;
use crate::error::{PaseError, Result};
use crate::linalg::SparseMatrix;

/// `I_H^h`: fine free DOFs × coarse free DOFs. The fine mesh must descend from
/// the coarse mesh through any sequence of uniform or bisection refinements.
pub fn build_prolongation(coarse: &FeSpace, fine: &FeSpace) -> Result<SparseMatrix> {
    let cm = &coarse.mesh;
    let fm = &fine.mesh;
    let nc = cm.num_vertices();
    if fm.num_vertices() < nc || fm.vertices[..nc] != cm.vertices[..] {
        return Err(PaseError::Nesting(
            "coarse vertices are not a prefix of the fine mesh".into(),
        ));
    }
    if fm.vertex_parents[nc..].iter().any(|p| p.is_none()) {
        return Err(PaseError::Nesting(
            "fine vertex without refinement ancestry".into(),
        ));
    }

    // sparse rows over coarse vertices, built in creation order
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(fm.num_vertices());
    for v in 0..nc {
        rows.push(vec![(v, 1.0)]);
    }
    for v in nc..fm.num_vertices() {
        let (a, b) = fm.vertex_parents[v].expect("checked above");
        if a >= v || b >= v {
            return Err(PaseError::Nesting(format!(
                "vertex {v} has a younger parent"
            )));
        }
        let mut r: Vec<(usize, f64)> = rows[a].iter().map(|&(c, w)| (c, 0.5 * w)).collect();
        r.extend(rows[b].iter().map(|&(c, w)| (c, 0.5 * w)));
        r.sort_by_key(|e| e.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(r.len());
        for (c, w) in r {
            match merged.last_mut() {
                Some(last) if last.0 == c => last.1 += w,
                _ => merged.push((c, w)),
            }
        }
        rows.push(merged);
    }

    let mut triplets = Vec::new();
    for (fd, &fv) in fine.free_dofs.iter().enumerate() {
        for &(cv, w) in &rows[fv] {
            if let Some(cd) = coarse.dof_of_vertex[cv] {
                if w != 0.0 {
                    triplets.push((fd, cd, w));
                }
            }
        }
    }
    SparseMatrix::from_triplets(fine.ndofs(), coarse.ndofs(), &triplets)
}
