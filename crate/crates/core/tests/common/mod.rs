//! Shared fixtures and the nalgebra reference eigensolver.

#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use pase_core::augmented::AugmentedPencil;
use pase_core::{DenseMatrix, MultiVector, SparseMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn to_na(d: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_fn(d.nrows(), d.ncols(), |i, j| d.get(i, j))
}

pub fn random_spd(n: usize, rng: &mut ChaCha8Rng, diag: f64) -> DenseMatrix {
    let g =
        DenseMatrix::from_row_major(n, n, (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect());
    g.transpose()
        .matmul(&g)
        .unwrap()
        .add_scaled(diag, &DenseMatrix::identity(n))
        .unwrap()
}

/// Generalized symmetric eigenpairs through `L⁻¹AL⁻ᵀ` and nalgebra's symmetric
/// eigensolver; ascending values, `B`-orthonormal vectors.
pub fn oracle_geig(a: &DMatrix<f64>, b: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let l = b.clone().cholesky().expect("oracle: B is not SPD").l();
    let linv = l.try_inverse().expect("oracle: singular factor");
    let mut c = &linv * a * linv.transpose();
    c = (&c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(c);
    let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    idx.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let q = DMatrix::from_fn(a.nrows(), idx.len(), |r, k| eig.eigenvectors[(r, idx[k])]);
    (values, linv.transpose() * q)
}

pub fn oracle_geig_dense(a: &DenseMatrix, b: &DenseMatrix) -> (Vec<f64>, DMatrix<f64>) {
    oracle_geig(&to_na(a), &to_na(b))
}

pub fn oracle_geig_sparse(a: &SparseMatrix, b: &SparseMatrix) -> (Vec<f64>, DMatrix<f64>) {
    oracle_geig(&to_na(&a.to_dense()), &to_na(&b.to_dense()))
}

/// Largest principal angle (radians) between the column spans of `x` and `y`
/// in the `B` inner product, with `y` `B`-orthonormal and at least as wide as `x`.
pub fn max_subspace_angle(x: &MultiVector, y: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let xm = DMatrix::from_fn(x.dim(), x.width(), |i, j| x.get(i, j));
    let gx = xm.transpose() * b * &xm;
    let lx = gx.cholesky().expect("angle: X is rank deficient").l();
    let qx = &xm * lx.try_inverse().unwrap().transpose();
    let resid = &qx - y * (y.transpose() * b * &qx);
    let g = resid.transpose() * b * &resid;
    let g = (&g + g.transpose()) * 0.5;
    let top = g
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(0.0f64, f64::max);
    top.sqrt().min(1.0).asin()
}

/// Split a dense SPD pencil into augmented blocks with corner size `n`.
pub fn split_pencil(a: &DenseMatrix, b: &DenseMatrix, n: usize) -> AugmentedPencil {
    let k = a.nrows() - n;
    let corner = |m: &DenseMatrix| {
        let idx: Vec<usize> = (0..n).collect();
        SparseMatrix::from_dense(&m.select_rows(&idx).select_columns(&idx))
    };
    let coupling = |m: &DenseMatrix| {
        let cols: Vec<Vec<f64>> = (0..k)
            .map(|j| (0..n).map(|i| m.get(i, n + j)).collect())
            .collect();
        MultiVector::from_columns(n, &cols)
    };
    let small = |m: &DenseMatrix| {
        let idx: Vec<usize> = (n..n + k).collect();
        m.select_rows(&idx).select_columns(&idx)
    };
    AugmentedPencil::from_blocks(
        Arc::new(corner(a)),
        Arc::new(corner(b)),
        coupling(a),
        coupling(b),
        small(a),
        small(b),
    )
    .unwrap()
}

/// A random SPD pencil of size `n + k` split into an augmented pencil.
pub fn random_augmented(
    n: usize,
    k: usize,
    seed: u64,
) -> (AugmentedPencil, DenseMatrix, DenseMatrix) {
    let mut r = rng(seed);
    let a = random_spd(n + k, &mut r, 1.0);
    let b = random_spd(n + k, &mut r, 2.0);
    (split_pencil(&a, &b, n), a, b)
}

pub fn rel_err(x: f64, y: f64) -> f64 {
    (x - y).abs() / y.abs().max(f64::MIN_POSITIVE)
}
