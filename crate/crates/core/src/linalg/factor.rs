//! Sparse Cholesky in envelope (profile) storage with reverse Cuthill-McKee ordering.

use std::collections::VecDeque;

use super::multivec::{dot, MultiVector};
use super::sparse::SparseMatrix;
use crate::error::{PaseError, Result};

/// `A = Pᵀ L Lᵀ P` for a symmetric positive definite sparse `A`.
#[derive(Debug, Clone)]
pub struct SparseCholesky {
    n: usize,
    perm: Vec<usize>,
    /// first stored column of each row of `L`
    first: Vec<usize>,
    /// start of each row in `data`; row `i` holds columns `first[i]..=i`
    start: Vec<usize>,
    data: Vec<f64>,
}

impl SparseCholesky {
    pub fn new(a: &SparseMatrix) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(PaseError::dims("SparseCholesky (square)", n, a.ncols()));
        }
        let perm = rcm_ordering(a);
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }

        let mut first: Vec<usize> = (0..n).collect();
        for old in 0..n {
            let i = inv[old];
            let (cols, _) = a.row(old);
            for &c in cols {
                let j = inv[c];
                if j < i {
                    first[i] = first[i].min(j);
                }
            }
        }
        let mut start = Vec::with_capacity(n + 1);
        let mut len = 0;
        for i in 0..n {
            start.push(len);
            len += i - first[i] + 1;
        }
        start.push(len);

        let mut data = vec![0.0; len];
        for old in 0..n {
            let i = inv[old];
            let (cols, vals) = a.row(old);
            for (&c, &v) in cols.iter().zip(vals) {
                let j = inv[c];
                if j <= i {
                    data[start[i] + j - first[i]] += v;
                }
            }
        }

        let scale = (0..n).fold(0.0f64, |m, i| m.max(data[start[i] + i - first[i]].abs()));
        for i in 0..n {
            let fi = first[i];
            for j in fi..=i {
                let fj = first[j];
                let lo = fi.max(fj);
                let s = {
                    let ri = &data[start[i] + lo - fi..start[i] + j - fi];
                    let rj = &data[start[j] + lo - fj..start[j] + j - fj];
                    dot(ri, rj)
                };
                let pos = start[i] + j - fi;
                if j < i {
                    let djj = data[start[j] + j - fj];
                    data[pos] = (data[pos] - s) / djj;
                } else {
                    let d = data[pos] - s;
                    if !(d > 1e-14 * scale) {
                        return Err(PaseError::Indefinite {
                            context: "sparse Cholesky",
                            index: perm[i],
                            value: d,
                        });
                    }
                    data[pos] = d.sqrt();
                }
            }
        }
        Ok(SparseCholesky {
            n,
            perm,
            first,
            start,
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored factor entries.
    pub fn envelope_size(&self) -> usize {
        self.data.len()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..self.n {
            let fi = self.first[i];
            let row = &self.data[self.start[i]..self.start[i + 1]];
            let s = dot(&row[..i - fi], &y[fi..i]);
            y[i] = (y[i] - s) / row[i - fi];
        }
        for i in (0..self.n).rev() {
            let fi = self.first[i];
            let row = &self.data[self.start[i]..self.start[i + 1]];
            y[i] /= row[i - fi];
            let yi = y[i];
            for (k, l) in (fi..i).zip(row) {
                y[k] -= l * yi;
            }
        }
        let mut x = vec![0.0; self.n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    pub fn solve_multi(&self, b: &MultiVector) -> Result<MultiVector> {
        if b.dim() != self.n {
            return Err(PaseError::dims(
                "SparseCholesky::solve_multi",
                self.n,
                b.dim(),
            ));
        }
        let mut out = MultiVector::zeros(self.n, b.width());
        for j in 0..b.width() {
            out.col_mut(j).copy_from_slice(&self.solve(b.col(j)));
        }
        Ok(out)
    }
}

/// Reverse Cuthill-McKee ordering of the symmetric sparsity pattern; `perm[new] = old`.
pub fn rcm_ordering(a: &SparseMatrix) -> Vec<usize> {
    let n = a.nrows();
    let degree: Vec<usize> = (0..n).map(|i| a.row(i).0.len()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&i| (degree[i], i));
    let mut queue = VecDeque::new();
    for &seed in &by_degree {
        if visited[seed] {
            continue;
        }
        let root = pseudo_peripheral(a, seed, &degree);
        visited[root] = true;
        queue.push_back(root);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nbrs: Vec<usize> = a
                .row(v)
                .0
                .iter()
                .copied()
                .filter(|&w| !visited[w])
                .collect();
            nbrs.sort_by_key(|&w| (degree[w], w));
            for w in nbrs {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

fn pseudo_peripheral(a: &SparseMatrix, seed: usize, degree: &[usize]) -> usize {
    let mut root = seed;
    let mut depth = 0;
    for _ in 0..8 {
        let (levels, last) = bfs_levels(a, root);
        let far = last
            .iter()
            .copied()
            .min_by_key(|&v| (degree[v], v))
            .unwrap_or(root);
        if levels <= depth {
            break;
        }
        depth = levels;
        root = far;
    }
    root
}

fn bfs_levels(a: &SparseMatrix, root: usize) -> (usize, Vec<usize>) {
    let mut seen = std::collections::HashSet::new();
    seen.insert(root);
    let mut frontier = vec![root];
    let mut levels = 0;
    loop {
        let mut next = Vec::new();
        for &v in &frontier {
            for &w in a.row(v).0 {
                if seen.insert(w) {
                    next.push(w);
                }
            }
        }
        if next.is_empty() {
            return (levels, frontier);
        }
        levels += 1;
        frontier = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_laplacian(m: usize) -> SparseMatrix {
        let n = m * m;
        let mut t = Vec::new();
        for i in 0..m {
            for j in 0..m {
                let p = i * m + j;
                t.push((p, p, 4.0));
                if i + 1 < m {
                    t.push((p, p + m, -1.0));
                    t.push((p + m, p, -1.0));
                }
                if j + 1 < m {
                    t.push((p, p + 1, -1.0));
                    t.push((p + 1, p, -1.0));
                }
            }
        }
        SparseMatrix::from_triplets(n, n, &t).unwrap()
    }

    #[test]
    fn solves_grid_laplacian() {
        let a = grid_laplacian(7);
        let x: Vec<f64> = (0..49).map(|i| (i as f64 * 0.37).sin()).collect();
        let b = a.mul_vec(&x);
        let f = SparseCholesky::new(&a).unwrap();
        let y = f.solve(&b);
        for (u, v) in x.iter().zip(&y) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn rcm_is_a_permutation() {
        let a = grid_laplacian(5);
        let mut p = rcm_ordering(&a);
        p.sort();
        assert_eq!(p, (0..25).collect::<Vec<_>>());
    }

    #[test]
    fn indefinite_is_rejected() {
        let a = SparseMatrix::from_diagonal(&[1.0, -2.0, 3.0]);
        assert!(matches!(
            SparseCholesky::new(&a),
            Err(PaseError::Indefinite { .. })
        ));
    }

    #[test]
    fn disconnected_pattern() {
        let a = SparseMatrix::from_diagonal(&[2.0, 4.0, 8.0]);
        let f = SparseCholesky::new(&a).unwrap();
        for x in f.solve(&[2.0, 4.0, 8.0]) {
            assert!((x - 1.0).abs() < 1e-15);
        }
    }
}
