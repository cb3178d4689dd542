//! Operator abstraction, block inner products and B-orthonormalization.

use rayon::prelude::*;

use super::dense::DenseMatrix;
use super::multivec::{axpy, dot, MultiVector};
use super::sparse::SparseMatrix;
use crate::error::{PaseError, Result};

/// Default relative drop tolerance for dependent directions.
pub const DEFAULT_DROP_TOL: f64 = 1e-10;

/// A symmetric linear operator acting on blocks of vectors.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &MultiVector) -> Result<MultiVector>;
}

impl LinearOperator for SparseMatrix {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &MultiVector) -> Result<MultiVector> {
        self.spmv(x)
    }
}

/// `a − shift · b`, applied without forming the sum.
pub struct Shifted<'a> {
    pub a: &'a dyn LinearOperator,
    pub b: &'a dyn LinearOperator,
    pub shift: f64,
}

impl LinearOperator for Shifted<'_> {
    fn dim(&self) -> usize {
        self.a.dim()
    }

    fn apply(&self, x: &MultiVector) -> Result<MultiVector> {
        let mut y = self.a.apply(x)?;
        if self.shift != 0.0 {
            y.axpy(-self.shift, &self.b.apply(x)?)?;
        }
        Ok(y)
    }
}

/// `op ∘ op`, used for normal-equation solves with a symmetric indefinite operator.
pub struct Squared<'a>(pub &'a dyn LinearOperator);

impl LinearOperator for Squared<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn apply(&self, x: &MultiVector) -> Result<MultiVector> {
        self.0.apply(&self.0.apply(x)?)
    }
}

/// Identity operator; stands in for the Euclidean inner product.
pub struct IdentityOp(pub usize);

impl LinearOperator for IdentityOp {
    fn dim(&self) -> usize {
        self.0
    }

    fn apply(&self, x: &MultiVector) -> Result<MultiVector> {
        Ok(x.clone())
    }
}

/// `Xᵀ Y` or `Xᵀ B Y`.
pub fn block_inner(
    x: &MultiVector,
    y: &MultiVector,
    b: Option<&SparseMatrix>,
) -> Result<DenseMatrix> {
    match b {
        Some(b) => block_inner_with(x, y, b),
        None => gram(x, y),
    }
}

/// `Xᵀ B Y` for an arbitrary operator.
pub fn block_inner_with(
    x: &MultiVector,
    y: &MultiVector,
    b: &dyn LinearOperator,
) -> Result<DenseMatrix> {
    if x.dim() != y.dim() {
        return Err(PaseError::dims("block_inner", x.dim(), y.dim()));
    }
    if b.dim() != x.dim() {
        return Err(PaseError::dims("block_inner (operator)", x.dim(), b.dim()));
    }
    gram(x, &b.apply(y)?)
}

/// Plain `Xᵀ Y`. Each entry is one dot product, so parallel evaluation is bitwise
/// identical to the serial one.
pub fn gram(x: &MultiVector, y: &MultiVector) -> Result<DenseMatrix> {
    if x.dim() != y.dim() {
        return Err(PaseError::dims("block_inner", x.dim(), y.dim()));
    }
    let (m, n) = (x.width(), y.width());
    let entries: Vec<f64> = if x.dim() * m * n > 1 << 16 {
        (0..m * n)
            .into_par_iter()
            .map(|k| dot(x.col(k / n), y.col(k % n)))
            .collect()
    } else {
        (0..m * n)
            .map(|k| dot(x.col(k / n), y.col(k % n)))
            .collect()
    };
    Ok(DenseMatrix::from_row_major(m, n, entries))
}

/// An orthonormal block together with `B` applied to it.
#[derive(Debug, Clone)]
pub struct Basis {
    pub q: MultiVector,
    pub bq: MultiVector,
}

impl Basis {
    pub fn empty(dim: usize) -> Self {
        Basis {
            q: MultiVector::zeros(dim, 0),
            bq: MultiVector::zeros(dim, 0),
        }
    }

    pub fn width(&self) -> usize {
        self.q.width()
    }
}

/// B-orthonormalize the columns of `v` (block Gram-Schmidt with one full
/// re-orthogonalization pass). Columns whose B-norm after projection falls below
/// `drop_tol` times the largest input column B-norm are removed.
pub fn b_orthonormalize(
    v: &MultiVector,
    b: &SparseMatrix,
    drop_tol: f64,
) -> Result<(MultiVector, usize)> {
    let basis = orthonormalize(v, b, None, drop_tol)?;
    let kept = basis.width();
    Ok((basis.q, kept))
}

/// General form: orthonormalize `v` in the `b` inner product, optionally against
/// a fixed orthonormal block `against` (which is left untouched).
pub fn orthonormalize(
    v: &MultiVector,
    b: &dyn LinearOperator,
    against: Option<&Basis>,
    drop_tol: f64,
) -> Result<Basis> {
    let dim = v.dim();
    if b.dim() != dim {
        return Err(PaseError::dims("b_orthonormalize", dim, b.dim()));
    }
    let bv = b.apply(v)?;
    let mut reference = 0.0f64;
    for j in 0..v.width() {
        let n2 = dot(v.col(j), bv.col(j));
        if n2 < 0.0 && n2.abs() > 1e-14 * dot(v.col(j), v.col(j)).max(f64::MIN_POSITIVE) {
            return Err(PaseError::Indefinite {
                context: "b_orthonormalize",
                index: j,
                value: n2,
            });
        }
        reference = reference.max(n2.max(0.0).sqrt());
    }
    let mut out = Basis::empty(dim);
    if reference == 0.0 {
        return Ok(out);
    }
    let threshold = drop_tol * reference;
    let fixed = against.map(|a| a.width()).unwrap_or(0);

    for j in 0..v.width() {
        let mut w = v.col(j).to_vec();
        let mut prev = dot(&w, bv.col(j)).max(0.0).sqrt();
        let mut passes = 0;
        loop {
            if let Some(a) = against {
                project_out(&mut w, a);
            }
            project_out(&mut w, &out);
            passes += 1;
            let bw = b.apply(&MultiVector::from_col_major(dim, 1, w.clone()))?;
            let n2 = dot(&w, bw.col(0));
            if n2 < -threshold * threshold {
                return Err(PaseError::Indefinite {
                    context: "b_orthonormalize",
                    index: fixed + j,
                    value: n2,
                });
            }
            let norm = n2.max(0.0).sqrt();
            if norm <= threshold {
                break;
            }
            // twice is enough unless the second pass still cancelled heavily
            if passes >= 2 && (norm > 0.1 * prev || passes >= 4) {
                let inv = 1.0 / norm;
                let q: Vec<f64> = w.iter().map(|x| x * inv).collect();
                let bq: Vec<f64> = bw.col(0).iter().map(|x| x * inv).collect();
                out.q.push_column(&q);
                out.bq.push_column(&bq);
                break;
            }
            prev = norm;
        }
    }
    Ok(out)
}

fn project_out(w: &mut [f64], basis: &Basis) {
    if basis.width() == 0 {
        return;
    }
    let coeffs: Vec<f64> = basis.bq.columns().map(|bq| dot(bq, w)).collect();
    for (k, c) in coeffs.into_iter().enumerate() {
        axpy(-c, basis.q.col(k), w);
    }
}

/// `‖Vᵀ B V − I‖_max`.
pub fn orthonormality_error(v: &MultiVector, b: &dyn LinearOperator) -> Result<f64> {
    let g = block_inner_with(v, v, b)?;
    let mut e = 0.0f64;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            e = e.max((g.get(i, j) - target).abs());
        }
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn laplace_1d(n: usize) -> SparseMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        SparseMatrix::from_triplets(n, n, &t).unwrap()
    }

    #[test]
    fn ones_inner_product_counts() {
        let x = MultiVector::from_columns(5, &[vec![1.0; 5]]);
        assert_eq!(block_inner(&x, &x, None).unwrap().get(0, 0), 5.0);
    }

    #[test]
    fn block_inner_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = MultiVector::random(4, 2, &mut rng);
        let y = MultiVector::random(4, 2, &mut rng);
        let g = block_inner(&x, &y, None).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut s = 0.0;
                for r in 0..4 {
                    s += x.get(r, i) * y.get(r, j);
                }
                assert!((g.get(i, j) - s).abs() <= 1e-15 * s.abs().max(1.0));
            }
        }
    }

    #[test]
    fn orthonormal_input_is_a_fixed_point() {
        let b = laplace_1d(6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = MultiVector::random(6, 3, &mut rng);
        let (q, k) = b_orthonormalize(&v, &b, DEFAULT_DROP_TOL).unwrap();
        assert_eq!(k, 3);
        let (q2, _) = b_orthonormalize(&q, &b, DEFAULT_DROP_TOL).unwrap();
        for j in 0..3 {
            let s = q
                .col(j)
                .iter()
                .zip(q2.col(j))
                .map(|(a, b)| a * b)
                .sum::<f64>()
                .signum();
            for i in 0..6 {
                assert!((q.get(i, j) - s * q2.get(i, j)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn duplicated_column_is_dropped() {
        let b = SparseMatrix::identity(4);
        let c = vec![1.0, 2.0, 0.0, -1.0];
        let v = MultiVector::from_columns(4, &[c.clone(), vec![0.0, 1.0, 1.0, 0.0], c]);
        let (q, k) = b_orthonormalize(&v, &b, DEFAULT_DROP_TOL).unwrap();
        assert_eq!(k, 2);
        assert!(orthonormality_error(&q, &b).unwrap() <= 1e-10);
    }

    #[test]
    fn random_euclidean_block_gets_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = MultiVector::random(4, 3, &mut rng);
        let b = SparseMatrix::identity(4);
        let (q, k) = b_orthonormalize(&v, &b, DEFAULT_DROP_TOL).unwrap();
        assert_eq!(k, 3);
        let g = block_inner(&q, &q, None).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let t = if i == j { 1.0 } else { 0.0 };
                assert!((g.get(i, j) - t).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn indefinite_b_is_reported() {
        let b = SparseMatrix::from_diagonal(&[1.0, -1.0]);
        let v = MultiVector::from_columns(2, &[vec![0.0, 1.0]]);
        assert!(matches!(
            b_orthonormalize(&v, &b, DEFAULT_DROP_TOL),
            Err(PaseError::Indefinite { .. })
        ));
    }
}
