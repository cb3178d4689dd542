//! Dense symmetric (generalized) eigensolver: Cholesky reduction, Householder
//! tridiagonalization and implicit QL.

use super::dense::{backward_subst_t, forward_subst, DenseMatrix};
use crate::error::{PaseError, Result};

/// Which eigenpairs to return, and in which order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selector {
    /// The `k` smallest, ascending.
    Smallest(usize),
    /// The `k` nearest to `theta`, by increasing distance (ties by value).
    Nearest { theta: f64, k: usize },
    /// Everything, ascending.
    All,
}

/// Solve `A c = λ B c` for symmetric `A` and symmetric positive definite `B`.
/// Eigenvectors are returned as columns, `B`-orthonormal.
pub fn dense_sym_geig(
    a: &DenseMatrix,
    b: &DenseMatrix,
    selector: Selector,
) -> Result<(Vec<f64>, DenseMatrix)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(PaseError::dims("dense_sym_geig (A square)", n, a.ncols()));
    }
    if b.nrows() != n || b.ncols() != n {
        return Err(PaseError::dims("dense_sym_geig (B)", n, b.nrows()));
    }
    let l = b.cholesky()?;

    // C = L⁻¹ A L⁻ᵀ, built column by column
    let mut y = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut col = a.column(j);
        forward_subst(&l, &mut col);
        for i in 0..n {
            y.set(i, j, col[i]);
        }
    }
    let mut c = DenseMatrix::zeros(n, n);
    for i in 0..n {
        let mut row = y.row(i).to_vec();
        forward_subst(&l, &mut row);
        for j in 0..n {
            c.set(i, j, row[j]);
        }
    }
    c.symmetrize();

    let (vals, q) = sym_eig(&c)?;
    let mut x = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut col = q.column(j);
        backward_subst_t(&l, &mut col);
        for i in 0..n {
            x.set(i, j, col[i]);
        }
    }
    Ok(select(&vals, &x, selector))
}

/// Standard symmetric eigenproblem; all eigenpairs, ascending, orthonormal columns.
pub fn sym_eig(a: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(PaseError::dims("sym_eig", n, a.ncols()));
    }
    if n == 0 {
        return Ok((Vec::new(), DenseMatrix::zeros(0, 0)));
    }
    let mut v: Vec<f64> = a.as_slice().to_vec();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tred2(n, &mut v, &mut d, &mut e);
    tql2(n, &mut v, &mut d, &mut e)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].total_cmp(&d[j]).then(i.cmp(&j)));
    let vals = order.iter().map(|&i| d[i]).collect();
    let mut q = DenseMatrix::zeros(n, n);
    for (jn, &jo) in order.iter().enumerate() {
        for i in 0..n {
            q.set(i, jn, v[i * n + jo]);
        }
    }
    Ok((vals, q))
}

fn select(vals: &[f64], vecs: &DenseMatrix, selector: Selector) -> (Vec<f64>, DenseMatrix) {
    let n = vals.len();
    let idx: Vec<usize> = match selector {
        Selector::All => (0..n).collect(),
        Selector::Smallest(k) => (0..k.min(n)).collect(),
        Selector::Nearest { theta, k } => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&i, &j| {
                (vals[i] - theta)
                    .abs()
                    .total_cmp(&(vals[j] - theta).abs())
                    .then(vals[i].total_cmp(&vals[j]))
                    .then(i.cmp(&j))
            });
            order.truncate(k.min(n));
            order
        }
    };
    let v = idx.iter().map(|&i| vals[i]).collect();
    (v, vecs.select_columns(&idx))
}

/// Householder reduction of the symmetric matrix held in `v` (row-major) to
/// tridiagonal form; `v` is overwritten with the accumulated transformation.
fn tred2(n: usize, v: &mut [f64], d: &mut [f64], e: &mut [f64]) {
    let at = |i: usize, j: usize| i * n + j;
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = 0.0;
                v[at(j, i)] = 0.0;
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[at(j, i)] = f;
                g = e[j] + v[at(j, j)] * f;
                for k in j + 1..i {
                    g += v[at(k, j)] * d[k];
                    e[k] += v[at(k, j)] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[at(k, j)] -= f * e[k] + g * d[k];
                }
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = 0.0;
            }
        }
        d[i] = h;
    }
    for i in 0..n - 1 {
        v[at(n - 1, i)] = v[at(i, i)];
        v[at(i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[at(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[at(k, i + 1)] * v[at(k, j)];
                }
                for k in 0..=i {
                    v[at(k, j)] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[at(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
        v[at(n - 1, j)] = 0.0;
    }
    v[at(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;
}

/// Implicit QL iteration on the tridiagonal `(d, e)`, accumulating into `v`.
fn tql2(n: usize, v: &mut [f64], d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let at = |i: usize, j: usize| i * n + j;
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1 = 0.0f64;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 && e[m].abs() > eps * tst1 {
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > 60 {
                    return Err(PaseError::Consistency(format!(
                        "tridiagonal QL did not converge for eigenvalue {l}"
                    )));
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().take(n).skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        let hk = v[at(k, i + 1)];
                        v[at(k, i + 1)] = s * v[at(k, i)] + c * hk;
                        v[at(k, i)] = c * v[at(k, i)] - s * hk;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}
