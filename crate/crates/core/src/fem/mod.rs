//! Two-dimensional P1 finite elements.

pub mod mesh;
pub mod prolong;
pub mod refine;
pub mod space;

pub use mesh::{build_lshape_mesh, build_unit_square_mesh, Edge, MeshLevel};
pub use prolong::build_prolongation;
pub use refine::{refine_bisection, refine_uniform};
pub use space::{assemble, assemble_full, variable_coefficients, Diffusion, FeSpace, Potential};
