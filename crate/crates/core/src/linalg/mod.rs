//! Sparse and dense kernels.

pub mod dense;
pub mod eig;
pub mod factor;
pub mod mmio;
pub mod multivec;
pub mod ops;
pub mod sparse;

pub use dense::{DenseLu, DenseMatrix};
pub use eig::{dense_sym_geig, sym_eig, Selector};
pub use factor::SparseCholesky;
pub use mmio::{
    read_matrix_market, read_matrix_market_file, write_matrix_market, write_matrix_market_file,
    MmSymmetry,
};
pub use multivec::MultiVector;
pub use ops::{b_orthonormalize, block_inner, Basis, LinearOperator};
pub use sparse::SparseMatrix;
