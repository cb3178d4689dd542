//! P1 Lagrange spaces with homogeneous Dirichlet conditions, and assembly.

use std::sync::Arc;

use super::mesh::MeshLevel;
use crate::error::{PaseError, Result};
use crate::linalg::{MultiVector, SparseMatrix};

/// Continuous piecewise-linear functions vanishing on the boundary.
#[derive(Debug, Clone)]
pub struct FeSpace {
    pub mesh: Arc<MeshLevel>,
    pub free_dofs: Vec<usize>,
    pub dof_of_vertex: Vec<Option<usize>>,
}

impl FeSpace {
    pub fn new(mesh: MeshLevel) -> Self {
        Self::from_arc(Arc::new(mesh))
    }

    pub fn from_arc(mesh: Arc<MeshLevel>) -> Self {
        let mut free_dofs = Vec::new();
        let mut dof_of_vertex = vec![None; mesh.num_vertices()];
        for (v, &b) in mesh.boundary_flags.iter().enumerate() {
            if !b {
                dof_of_vertex[v] = Some(free_dofs.len());
                free_dofs.push(v);
            }
        }
        FeSpace {
            mesh,
            free_dofs,
            dof_of_vertex,
        }
    }

    pub fn ndofs(&self) -> usize {
        self.free_dofs.len()
    }

    /// Nodal values on every vertex (zero on the boundary) from free-DOF coefficients.
    pub fn to_vertex_values(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.mesh.num_vertices()];
        for (d, &v) in self.free_dofs.iter().enumerate() {
            out[v] = u[d];
        }
        out
    }

    /// Nodal interpolation of a function onto the free DOFs.
    pub fn interpolate(&self, f: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
        self.free_dofs
            .iter()
            .map(|&v| f(self.mesh.vertices[v]))
            .collect()
    }

    /// Columns of `u` expanded to vertex values.
    pub fn vertex_block(&self, u: &MultiVector) -> Vec<Vec<f64>> {
        u.columns().map(|c| self.to_vertex_values(c)).collect()
    }
}

pub type MatrixField = Arc<dyn Fn([f64; 2]) -> [[f64; 2]; 2] + Send + Sync>;
pub type ScalarField = Arc<dyn Fn([f64; 2]) -> f64 + Send + Sync>;

/// The coefficient `A(x)` of `−∇·(A∇u)`.
#[derive(Clone)]
pub enum Diffusion {
    Identity,
    Constant([[f64; 2]; 2]),
    Variable(MatrixField),
}

/// The coefficient `φ(x)` of the zeroth-order term.
#[derive(Clone)]
pub enum Potential {
    Zero,
    Constant(f64),
    Variable(ScalarField),
}

impl std::fmt::Debug for Diffusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Diffusion::Identity => write!(f, "Identity"),
            Diffusion::Constant(a) => write!(f, "Constant({a:?})"),
            Diffusion::Variable(_) => write!(f, "Variable(..)"),
        }
    }
}

impl std::fmt::Debug for Potential {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Potential::Zero => write!(f, "Zero"),
            Potential::Constant(c) => write!(f, "Constant({c})"),
            Potential::Variable(_) => write!(f, "Variable(..)"),
        }
    }
}

/// `A(x) = I + (x−c)(x−c)ᵀ` with `c = (½, ½)`, and `φ(x) = exp((x₁−½)(x₂−½))`.
pub fn variable_coefficients() -> (Diffusion, Potential) {
    let diff: MatrixField = Arc::new(|x: [f64; 2]| {
        let (s, t) = (x[0] - 0.5, x[1] - 0.5);
        [[1.0 + s * s, s * t], [s * t, 1.0 + t * t]]
    });
    let pot: ScalarField = Arc::new(|x: [f64; 2]| ((x[0] - 0.5) * (x[1] - 0.5)).exp());
    (Diffusion::Variable(diff), Potential::Variable(pot))
}

/// Gradients of the three barycentric coordinates and the area of triangle `t`.
pub(crate) fn p1_gradients(mesh: &MeshLevel, t: usize) -> Result<([[f64; 2]; 3], f64)> {
    let area = mesh.signed_area(t);
    if !(area > 0.0) {
        return Err(PaseError::Mesh(format!(
            "triangle {t} is degenerate (area {area:e})"
        )));
    }
    let c = mesh.corners(t);
    let mut g = [[0.0; 2]; 3];
    for i in 0..3 {
        let (p, q) = (c[(i + 1) % 3], c[(i + 2) % 3]);
        g[i] = [(p[1] - q[1]) / (2.0 * area), (q[0] - p[0]) / (2.0 * area)];
    }
    Ok((g, area))
}

fn element_matrices(
    mesh: &MeshLevel,
    t: usize,
    diffusion: &Diffusion,
    potential: &Potential,
) -> Result<([[f64; 3]; 3], [[f64; 3]; 3])> {
    let (g, area) = p1_gradients(mesh, t)?;
    let c = mesh.corners(t);
    // edge midpoints: midpoint k lies opposite vertex k, where λ_k = 0 and the others are ½
    let mids: [[f64; 2]; 3] = std::array::from_fn(|k| {
        let (p, q) = (c[(k + 1) % 3], c[(k + 2) % 3]);
        [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])]
    });

    let a_mean = match diffusion {
        Diffusion::Identity => [[1.0, 0.0], [0.0, 1.0]],
        Diffusion::Constant(a) => *a,
        Diffusion::Variable(f) => {
            let mut s = [[0.0; 2]; 2];
            for m in mids {
                let v = f(m);
                for r in 0..2 {
                    for q in 0..2 {
                        s[r][q] += v[r][q] / 3.0;
                    }
                }
            }
            s
        }
    };
    let mut ke = [[0.0; 3]; 3];
    let mut me = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let ag = [
                a_mean[0][0] * g[j][0] + a_mean[0][1] * g[j][1],
                a_mean[1][0] * g[j][0] + a_mean[1][1] * g[j][1],
            ];
            ke[i][j] = area * (g[i][0] * ag[0] + g[i][1] * ag[1]);
            me[i][j] = area * if i == j { 2.0 } else { 1.0 } / 12.0;
        }
    }
    match potential {
        Potential::Zero => {}
        Potential::Constant(phi) => {
            for i in 0..3 {
                for j in 0..3 {
                    ke[i][j] += phi * me[i][j];
                }
            }
        }
        Potential::Variable(f) => {
            for (k, m) in mids.iter().enumerate() {
                let w = area / 3.0 * f(*m);
                for i in 0..3 {
                    for j in 0..3 {
                        let li = if i == k { 0.0 } else { 0.5 };
                        let lj = if j == k { 0.0 } else { 0.5 };
                        ke[i][j] += w * li * lj;
                    }
                }
            }
        }
    }
    Ok((ke, me))
}

/// Stiffness and mass matrices over all vertices (no boundary elimination).
pub fn assemble_full(
    mesh: &MeshLevel,
    diffusion: &Diffusion,
    potential: &Potential,
) -> Result<(SparseMatrix, SparseMatrix)> {
    let map: Vec<Option<usize>> = (0..mesh.num_vertices()).map(Some).collect();
    assemble_with(mesh, &map, mesh.num_vertices(), diffusion, potential)
}

/// Stiffness `A_h` and mass `B_h` restricted to the free DOFs of `space`.
pub fn assemble(
    space: &FeSpace,
    diffusion: &Diffusion,
    potential: &Potential,
) -> Result<(SparseMatrix, SparseMatrix)> {
    assemble_with(
        &space.mesh,
        &space.dof_of_vertex,
        space.ndofs(),
        diffusion,
        potential,
    )
}

fn assemble_with(
    mesh: &MeshLevel,
    map: &[Option<usize>],
    n: usize,
    diffusion: &Diffusion,
    potential: &Potential,
) -> Result<(SparseMatrix, SparseMatrix)> {
    let mut ta = Vec::with_capacity(9 * mesh.num_triangles());
    let mut tb = Vec::with_capacity(9 * mesh.num_triangles());
    for t in 0..mesh.num_triangles() {
        let (ke, me) = element_matrices(mesh, t, diffusion, potential)?;
        let tri = mesh.triangles[t];
        for i in 0..3 {
            let Some(gi) = map[tri[i]] else { continue };
            for j in 0..3 {
                let Some(gj) = map[tri[j]] else { continue };
                ta.push((gi, gj, ke[i][j]));
                tb.push((gi, gj, me[i][j]));
            }
        }
    }
    let mut a = SparseMatrix::from_triplets(n, n, &ta)?;
    let b = SparseMatrix::from_triplets(n, n, &tb)?;
    if let Diffusion::Variable(_) | Diffusion::Constant(_) = diffusion {
        // element matrices use a symmetric tensor, but guard against tiny drift
        if a.asymmetry() > 0.0 {
            a = a.add_scaled(1.0, &a.transpose())?.scaled(0.5);
        }
    }
    Ok((a, b))
}
