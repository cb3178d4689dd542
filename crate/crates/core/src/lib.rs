pub mod adaptive;
pub mod augmented;
pub mod driver;
pub mod error;
pub mod fem;
pub mod gcg;
pub mod linalg;
pub mod pencil;
pub mod solvers;

pub use error::{PaseError, Result};
pub use linalg::{DenseMatrix, MultiVector, SparseMatrix};
