//! Dense blocks of column vectors stored column-major.

use rand::Rng;

use super::dense::DenseMatrix;
use crate::error::{PaseError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MultiVector {
    dim: usize,
    width: usize,
    data: Vec<f64>,
}

impl MultiVector {
    pub fn zeros(dim: usize, width: usize) -> Self {
        MultiVector {
            dim,
            width,
            data: vec![0.0; dim * width],
        }
    }

    pub fn from_col_major(dim: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            dim * width,
            "column-major buffer has wrong length"
        );
        MultiVector { dim, width, data }
    }

    pub fn from_columns(dim: usize, cols: &[Vec<f64>]) -> Self {
        let mut data = Vec::with_capacity(dim * cols.len());
        for c in cols {
            assert_eq!(c.len(), dim, "column has wrong length");
            data.extend_from_slice(c);
        }
        MultiVector {
            dim,
            width: cols.len(),
            data,
        }
    }

    /// Columns of the identity, `e_0 .. e_{width-1}`.
    pub fn identity(dim: usize, width: usize) -> Self {
        let mut m = Self::zeros(dim, width);
        for j in 0..width.min(dim) {
            m.col_mut(j)[j] = 1.0;
        }
        m
    }

    pub fn random<R: Rng>(dim: usize, width: usize, rng: &mut R) -> Self {
        let data = (0..dim * width).map(|_| rng.gen_range(-1.0..1.0)).collect();
        MultiVector { dim, width, data }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    #[inline]
    pub fn col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.width).map(move |j| self.col(j))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.dim + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[j * self.dim + i] = v;
    }

    pub fn push_column(&mut self, c: &[f64]) {
        assert_eq!(c.len(), self.dim);
        self.data.extend_from_slice(c);
        self.width += 1;
    }

    pub fn select_columns(&self, idx: &[usize]) -> MultiVector {
        let mut data = Vec::with_capacity(self.dim * idx.len());
        for &j in idx {
            data.extend_from_slice(self.col(j));
        }
        MultiVector {
            dim: self.dim,
            width: idx.len(),
            data,
        }
    }

    pub fn column_range(&self, start: usize, end: usize) -> MultiVector {
        MultiVector {
            dim: self.dim,
            width: end - start,
            data: self.data[start * self.dim..end * self.dim].to_vec(),
        }
    }

    /// Horizontal concatenation `[self, other]`.
    pub fn hcat(&self, other: &MultiVector) -> Result<MultiVector> {
        if self.dim != other.dim {
            return Err(PaseError::dims("MultiVector::hcat", self.dim, other.dim));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(MultiVector {
            dim: self.dim,
            width: self.width + other.width,
            data,
        })
    }

    /// Rows `[start, end)` of every column.
    pub fn row_range(&self, start: usize, end: usize) -> MultiVector {
        let d = end - start;
        let mut data = Vec::with_capacity(d * self.width);
        for c in self.columns() {
            data.extend_from_slice(&c[start..end]);
        }
        MultiVector {
            dim: d,
            width: self.width,
            data,
        }
    }

    /// Vertical concatenation: `self` on top of `bottom`.
    pub fn vcat(&self, bottom: &MultiVector) -> Result<MultiVector> {
        if self.width != bottom.width {
            return Err(PaseError::dims(
                "MultiVector::vcat",
                self.width,
                bottom.width,
            ));
        }
        let dim = self.dim + bottom.dim;
        let mut data = Vec::with_capacity(dim * self.width);
        for j in 0..self.width {
            data.extend_from_slice(self.col(j));
            data.extend_from_slice(bottom.col(j));
        }
        Ok(MultiVector {
            dim,
            width: self.width,
            data,
        })
    }

    /// `self · c` for a dense `width × m` coefficient matrix.
    pub fn mul_dense(&self, c: &DenseMatrix) -> Result<MultiVector> {
        if c.nrows() != self.width {
            return Err(PaseError::dims(
                "MultiVector::mul_dense",
                self.width,
                c.nrows(),
            ));
        }
        let m = c.ncols();
        let mut out = MultiVector::zeros(self.dim, m);
        for j in 0..m {
            let dst = &mut out.data[j * self.dim..(j + 1) * self.dim];
            for k in 0..self.width {
                let s = c.get(k, j);
                if s != 0.0 {
                    axpy(s, &self.data[k * self.dim..(k + 1) * self.dim], dst);
                }
            }
        }
        Ok(out)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &MultiVector) -> Result<()> {
        if self.dim != other.dim || self.width != other.width {
            return Err(PaseError::dims(
                "MultiVector::axpy",
                self.dim * self.width,
                other.dim * other.width,
            ));
        }
        axpy(alpha, &other.data, &mut self.data);
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn scale_columns(&mut self, s: &[f64]) {
        for (j, &sj) in s.iter().enumerate().take(self.width) {
            self.col_mut(j).iter_mut().for_each(|x| *x *= sj);
        }
    }

    pub fn column_norms(&self) -> Vec<f64> {
        self.columns().map(norm2).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    // four partial sums keep the summation order fixed and vectorizable
    let mut acc = [0.0f64; 4];
    let chunks = x.len() / 4;
    for c in 0..chunks {
        let b = 4 * c;
        acc[0] += x[b] * y[b];
        acc[1] += x[b + 1] * y[b + 1];
        acc[2] += x[b + 2] * y[b + 2];
        acc[3] += x[b + 3] * y[b + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..x.len() {
        s += x[i] * y[i];
    }
    s
}

#[inline]
pub fn norm2(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
