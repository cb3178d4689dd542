//! Block GCG eigensolvers over the subspace `[X, P, W]`: the smallest-eigenpair
//! iteration and the shifted variant with harmonic Rayleigh-Ritz.

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{PaseError, Result};
use crate::linalg::dense::{backward_subst_t, forward_subst};
use crate::linalg::ops::{
    gram, orthonormalize, Basis, IdentityOp, LinearOperator, DEFAULT_DROP_TOL,
};
use crate::linalg::{dense_sym_geig, DenseMatrix, MultiVector, Selector};
use crate::pencil::{BSide, Pencil, ShiftSolve};
use crate::solvers::BcgConfig;

/// Largest tolerated relative asymmetry of a projected matrix.
const PROJECTED_ASYMMETRY_TOL: f64 = 1e-10;
const MAX_SHIFT_TRIES: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GcgOptions {
    /// number of wanted eigenpairs
    pub nev: usize,
    pub tol: f64,
    pub max_sweeps: usize,
    /// inner solves for `W`
    pub inner: BcgConfig,
    pub drop_tol: f64,
}

impl GcgOptions {
    pub fn new(nev: usize, tol: f64) -> Self {
        GcgOptions {
            nev,
            tol,
            ..GcgOptions::default()
        }
    }
}

impl Default for GcgOptions {
    fn default() -> Self {
        GcgOptions {
            nev: 1,
            tol: 1e-8,
            max_sweeps: 200,
            inner: BcgConfig::default(),
            drop_tol: DEFAULT_DROP_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub sweep: usize,
    /// Ritz values in original coordinates, in the order the solver keeps them
    pub ritz: Vec<f64>,
    pub residuals: Vec<f64>,
    /// inner-solve shift used to build this sweep's `W` (`None` for the entry record)
    pub mu: Option<f64>,
    pub normal_equations: bool,
    pub locked: usize,
}

#[derive(Debug, Clone)]
pub struct GcgResult {
    /// eigenvalues of the original (unshifted) pencil
    pub values: Vec<f64>,
    /// B-orthonormal eigenvector approximations in the pencil's coordinates
    pub vectors: MultiVector,
    pub residuals: Vec<f64>,
    pub converged: bool,
    pub sweeps: usize,
    pub history: Vec<SweepRecord>,
}

/// `‖A x − λ B x‖₂ / (|λ| ‖x‖_B)` for every column, with `λ` given in the
/// stored coordinates and `shift` added back for the denominator.
fn residual_norms(
    ax: &MultiVector,
    bx: &MultiVector,
    x: &MultiVector,
    nu: &[f64],
    shift: f64,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(nu.len());
    for (j, &v) in nu.iter().enumerate() {
        let lambda = v + shift;
        if lambda == 0.0 {
            return Err(PaseError::CriterionUndefined { column: j });
        }
        let xb = crate::linalg::multivec::dot(x.col(j), bx.col(j))
            .max(0.0)
            .sqrt();
        let r: f64 = ax
            .col(j)
            .iter()
            .zip(bx.col(j))
            .map(|(a, b)| (a - v * b).powi(2))
            .sum::<f64>()
            .sqrt();
        out.push(if xb > 0.0 {
            r / (lambda.abs() * xb)
        } else {
            f64::INFINITY
        });
    }
    Ok(out)
}

fn checked_projection(v: &MultiVector, av: &MultiVector) -> Result<DenseMatrix> {
    let mut h = gram(v, av)?;
    let asym = h.asymmetry();
    if asym > PROJECTED_ASYMMETRY_TOL * h.max_abs().max(f64::MIN_POSITIVE) {
        return Err(PaseError::Consistency(format!(
            "projected matrix asymmetric by {asym:e}"
        )));
    }
    h.symmetrize();
    Ok(h)
}

/// Ritz pairs of the pencil on `span(V)`: values (original coordinates, ascending)
/// and the coefficient matrix `C` with `VC` B-orthonormal.
pub fn rayleigh_ritz<P: Pencil + ?Sized>(
    p: &P,
    v: &MultiVector,
) -> Result<(Vec<f64>, DenseMatrix)> {
    let h = checked_projection(v, &p.apply_a(v)?)?;
    let g = checked_projection(v, &p.apply_b(v)?)?;
    let (vals, c) = dense_sym_geig(&h, &g, Selector::All)?;
    Ok((vals.into_iter().map(|x| x + p.shift()).collect(), c))
}

/// `W ≈ (A − μB)⁻¹ B X Λ` from the initial guess `X`.
pub fn compute_w<P: Pencil + ?Sized>(
    p: &P,
    x: &MultiVector,
    lambda: &[f64],
    mu: f64,
    cfg: &BcgConfig,
) -> Result<ShiftSolve> {
    let bx = p.apply_b(x)?;
    compute_w_with(p, x, &bx, lambda, mu, cfg)
}

fn compute_w_with<P: Pencil + ?Sized>(
    p: &P,
    x: &MultiVector,
    bx: &MultiVector,
    lambda: &[f64],
    mu: f64,
    cfg: &BcgConfig,
) -> Result<ShiftSolve> {
    let mut rhs = bx.clone();
    rhs.scale_columns(lambda);
    p.solve_shifted(mu, &rhs, x, cfg)
}

/// `(A − μB)⁻¹ (A X − B X Λ)` for the selected columns. Spans the same space
/// together with `X` as `(A − μB)⁻¹ B X Λ`, but carries the new direction at
/// full scale instead of as a small perturbation of `X`.
fn correction_block<P: Pencil + ?Sized>(
    p: &P,
    ax: &MultiVector,
    bx: &MultiVector,
    nu: &[f64],
    cols: &[usize],
    mu: f64,
    cfg: &BcgConfig,
) -> Result<ShiftSolve> {
    let mut r = ax.select_columns(cols);
    for (k, &j) in cols.iter().enumerate() {
        crate::linalg::multivec::axpy(-nu[j], bx.col(j), r.col_mut(k));
    }
    let x0 = MultiVector::zeros(r.dim(), r.width());
    p.solve_shifted(mu, &r, &x0, cfg)
}

/// `V[:, skip..] · C[skip.., :]`: the component of `V C` outside the span of the
/// first `skip` basis vectors, columns rescaled to unit length and zero columns dropped.
fn complement_part(v: &MultiVector, c: &DenseMatrix, skip: usize) -> Result<MultiVector> {
    let rows: Vec<usize> = (skip..v.width()).collect();
    let rest = v.column_range(skip, v.width());
    let mut out = rest.mul_dense(&c.select_rows(&rows))?;
    let norms = out.column_norms();
    let keep: Vec<usize> = (0..out.width()).filter(|&j| norms[j] > 0.0).collect();
    out = out.select_columns(&keep);
    normalize_columns(&mut out);
    Ok(out)
}

/// The part of `X_new` B-orthogonal to the B-orthonormal block `X_old`.
pub fn compute_p(
    x_new: &MultiVector,
    x_old: &MultiVector,
    bx_old: &MultiVector,
    b: &dyn LinearOperator,
    drop_tol: f64,
) -> Result<MultiVector> {
    let against = Basis {
        q: x_old.clone(),
        bq: bx_old.clone(),
    };
    Ok(orthonormalize(x_new, b, Some(&against), drop_tol)?.q)
}

/// Inner-solve shift strictly below the current Ritz values for which `A − μB`
/// passes the definiteness probe.
pub fn select_shift<P: Pencil + ?Sized>(p: &P, ritz: &[f64]) -> Result<f64> {
    let min = ritz.iter().copied().fold(f64::INFINITY, f64::min);
    let max = ritz.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !min.is_finite() {
        return Err(PaseError::InvalidArgument(
            "no Ritz values to place a shift".into(),
        ));
    }
    let spread = max - min;
    let mut step = if spread > 1e-12 * min.abs().max(1e-300) {
        0.1 * spread
    } else if min != 0.0 {
        0.1 * min.abs()
    } else {
        1.0
    };
    for _ in 0..MAX_SHIFT_TRIES {
        let mu = min - step;
        if p.is_shift_spd(mu)? {
            return Ok(mu);
        }
        step *= 2.0;
    }
    Err(PaseError::Consistency(format!(
        "no definite inner shift found below {min:e}"
    )))
}

fn normalize_columns(w: &mut MultiVector) {
    let s: Vec<f64> = w
        .column_norms()
        .into_iter()
        .map(|n| if n > 0.0 { 1.0 / n } else { 0.0 })
        .collect();
    w.scale_columns(&s);
}

fn remove_first_column(x: &MultiVector) -> MultiVector {
    x.column_range(1, x.width())
}

/// Smallest `nev` eigenpairs of the pencil, starting from the block `x0`
/// (`x0.width() ≥ nev`; extra columns act as guard vectors).
pub fn gcg_aug<P: Pencil + ?Sized>(
    p: &P,
    x0: &MultiVector,
    opts: &GcgOptions,
) -> Result<GcgResult> {
    let nev = opts.nev;
    if nev == 0 || !(opts.tol > 0.0) {
        return Err(PaseError::InvalidArgument(
            "gcg needs nev >= 1 and tol > 0".into(),
        ));
    }
    if x0.dim() != p.dim() {
        return Err(PaseError::dims("gcg_aug", p.dim(), x0.dim()));
    }
    if x0.width() < nev {
        return Err(PaseError::InvalidArgument(format!(
            "initial block has {} columns, need at least {nev}",
            x0.width()
        )));
    }
    let bop = BSide(p);
    let shift = p.shift();
    let v0 = orthonormalize(x0, &bop, None, opts.drop_tol)?;
    if v0.width() < nev {
        return Err(PaseError::Degenerate(format!(
            "initial block has B-rank {} below nev = {nev}",
            v0.width()
        )));
    }

    // initial Rayleigh-Ritz
    let av0 = p.apply_a(&v0.q)?;
    let h = checked_projection(&v0.q, &av0)?;
    let g = checked_projection(&v0.q, &v0.bq)?;
    let (mut nu, c) = dense_sym_geig(&h, &g, Selector::All)?;
    let mut x = v0.q.mul_dense(&c)?;
    let mut ax = av0.mul_dense(&c)?;
    let mut bx = v0.bq.mul_dense(&c)?;

    let mut locked = Basis::empty(p.dim());
    let mut locked_ax = MultiVector::zeros(p.dim(), 0);
    let mut locked_nu: Vec<f64> = Vec::new();
    let mut locked_res: Vec<f64> = Vec::new();
    let mut pblk = MultiVector::zeros(p.dim(), 0);
    let mut history = Vec::new();
    let mut sweeps = 0;
    let mut mu_used = None;
    let mut normal_used = false;

    loop {
        let res = residual_norms(&ax, &bx, &x, &nu, shift)?;
        let mut res = res;
        // lock the converged prefix
        while locked_nu.len() < nev && !nu.is_empty() && res[0] <= opts.tol {
            locked.q.push_column(x.col(0));
            locked.bq.push_column(bx.col(0));
            locked_ax.push_column(ax.col(0));
            locked_nu.push(nu.remove(0));
            locked_res.push(res.remove(0));
            x = remove_first_column(&x);
            ax = remove_first_column(&ax);
            bx = remove_first_column(&bx);
        }
        history.push(SweepRecord {
            sweep: sweeps,
            ritz: locked_nu.iter().chain(&nu).map(|v| v + shift).collect(),
            residuals: locked_res.iter().chain(&res).copied().collect(),
            mu: mu_used.map(|m: f64| m + shift),
            normal_equations: normal_used,
            locked: locked_nu.len(),
        });
        let done = locked_nu.len() >= nev;
        if done || sweeps >= opts.max_sweeps {
            return Ok(finish_smallest(
                nev, shift, done, sweeps, history, locked, locked_nu, locked_res, x, bx, nu, res,
            ));
        }
        sweeps += 1;

        let all: Vec<f64> = locked_nu.iter().chain(&nu).copied().collect();
        let mu = select_shift(p, &all)?;
        let want: Vec<usize> = (0..nu.len()).filter(|&j| res[j] > opts.tol).collect();
        let w = correction_block(p, &ax, &bx, &nu, &want, mu, &opts.inner)?;
        mu_used = Some(mu);
        normal_used = w.normal_equations;
        let mut wblk = w.x;
        normalize_columns(&mut wblk);

        let cat = x.hcat(&pblk)?.hcat(&wblk)?;
        let v = orthonormalize(&cat, &bop, Some(&locked), opts.drop_tol)?;
        let width = nu.len();
        if v.width() < width {
            return Err(PaseError::Degenerate(format!(
                "search space collapsed to {} columns, need {width}",
                v.width()
            )));
        }
        let av = p.apply_a(&v.q)?;
        let h = checked_projection(&v.q, &av)?;
        let g = checked_projection(&v.q, &v.bq)?;
        let (nu_new, c) = dense_sym_geig(&h, &g, Selector::Smallest(width))?;
        let x_new = v.q.mul_dense(&c)?;
        pblk = complement_part(&v.q, &c, x.width())?;
        ax = av.mul_dense(&c)?;
        bx = v.bq.mul_dense(&c)?;
        x = x_new;
        nu = nu_new;
    }
}

#[allow(clippy::too_many_arguments)]
fn finish_smallest(
    nev: usize,
    shift: f64,
    converged: bool,
    sweeps: usize,
    history: Vec<SweepRecord>,
    locked: Basis,
    locked_nu: Vec<f64>,
    locked_res: Vec<f64>,
    x: MultiVector,
    _bx: MultiVector,
    nu: Vec<f64>,
    res: Vec<f64>,
) -> GcgResult {
    let take = nev - locked_nu.len().min(nev);
    let mut vectors = locked.q;
    let mut values: Vec<f64> = locked_nu.iter().map(|v| v + shift).collect();
    let mut residuals = locked_res;
    for j in 0..take.min(nu.len()) {
        vectors.push_column(x.col(j));
        values.push(nu[j] + shift);
        residuals.push(res[j]);
    }
    let order = stable_order(&values, |a, b| a.total_cmp(b));
    GcgResult {
        values: order.iter().map(|&i| values[i]).collect(),
        vectors: vectors.select_columns(&order),
        residuals: order.iter().map(|&i| residuals[i]).collect(),
        converged,
        sweeps,
        history,
    }
}

/// Indices sorted by `cmp`, ties broken by index.
fn stable_order(keys: &[f64], cmp: impl Fn(&f64, &f64) -> std::cmp::Ordering) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&i, &j| cmp(&keys[i], &keys[j]).then(i.cmp(&j)));
    idx
}

/// Eigenvalues and eigenvectors of a general real matrix through the complex
/// Schur form, sorted by decreasing modulus.
fn nonsymmetric_eig(h: &DenseMatrix) -> Result<Vec<(Complex<f64>, Vec<Complex<f64>>)>> {
    let n = h.nrows();
    let m = DMatrix::<Complex<f64>>::from_fn(n, n, |i, j| Complex::new(h.get(i, j), 0.0));
    let schur = nalgebra::linalg::Schur::try_new(m, f64::EPSILON, 100 * n.max(10))
        .ok_or_else(|| PaseError::Consistency("Schur iteration did not converge".into()))?;
    let (q, t) = schur.unpack();
    let scale = t
        .iter()
        .fold(0.0f64, |s, z| s.max(z.norm()))
        .max(f64::MIN_POSITIVE);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let lam = t[(i, i)];
        let mut z = vec![Complex::new(0.0, 0.0); n];
        z[i] = Complex::new(1.0, 0.0);
        for jj in (0..i).rev() {
            let mut s = Complex::new(0.0, 0.0);
            for l in jj + 1..=i {
                s += t[(jj, l)] * z[l];
            }
            let mut d = t[(jj, jj)] - lam;
            if d.norm() < f64::EPSILON * scale {
                d = Complex::new(f64::EPSILON * scale, 0.0);
            }
            z[jj] = -s / d;
        }
        let y: Vec<Complex<f64>> = (0..n)
            .map(|r| (0..=i).map(|l| q[(r, l)] * z[l]).sum())
            .collect();
        out.push((lam, y));
    }
    let mods: Vec<f64> = out.iter().map(|(l, _)| -l.norm()).collect();
    let order = stable_order(&mods, |a, b| a.total_cmp(b));
    let mut sorted: Vec<Option<_>> = out.into_iter().map(Some).collect();
    Ok(order
        .into_iter()
        .map(|i| sorted[i].take().expect("each index once"))
        .collect())
}

/// Harmonic Ritz directions of `K = A − θB` on the Euclidean-orthonormal `V`:
/// solutions of `(KV)ᵀ(KV) c = ν (KV)ᵀ(BV) c` with `ν` nearest zero.
fn harmonic_rayleigh_ritz(kv: &MultiVector, bv: &MultiVector, theta: f64) -> Result<DenseMatrix> {
    let mut g = gram(kv, kv)?;
    g.symmetrize();
    let m = gram(kv, bv)?;
    let l = g
        .cholesky()
        .map_err(|_| PaseError::ShiftProximity { theta })?;
    let s = m.ncols();
    // H = L⁻¹ M L⁻ᵀ
    let mut tmp = DenseMatrix::zeros(s, s);
    for j in 0..s {
        let mut col = m.column(j);
        forward_subst(&l, &mut col);
        for i in 0..s {
            tmp.set(i, j, col[i]);
        }
    }
    let mut h = DenseMatrix::zeros(s, s);
    for i in 0..s {
        let mut row = tmp.row(i).to_vec();
        forward_subst(&l, &mut row);
        for j in 0..s {
            h.set(i, j, row[j]);
        }
    }
    let pairs = nonsymmetric_eig(&h)?;
    // candidate directions c = L⁻ᵀ y, real and imaginary parts of complex pairs
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for (sigma, y) in pairs {
        let mut re: Vec<f64> = y.iter().map(|z| z.re).collect();
        backward_subst_t(&l, &mut re);
        cols.push(re);
        if sigma.im.abs() > 1e-12 * sigma.norm() {
            let mut im: Vec<f64> = y.iter().map(|z| z.im).collect();
            backward_subst_t(&l, &mut im);
            cols.push(im);
        }
    }
    let mut c = DenseMatrix::zeros(s, cols.len());
    for (j, col) in cols.iter().enumerate() {
        for i in 0..s {
            c.set(i, j, col[i]);
        }
    }
    Ok(c)
}

/// The `n` eigenpairs of the pencil closest to `theta`, sorted by `|λ − θ|`.
/// Works on the pencil shifted to `theta`; vectors come back B-orthonormal.
pub fn gcg_aug_shifted<P: Pencil>(
    p: &P,
    theta: f64,
    x0: &MultiVector,
    opts: &GcgOptions,
) -> Result<GcgResult> {
    let n = opts.nev;
    if n == 0 || !(opts.tol > 0.0) {
        return Err(PaseError::InvalidArgument(
            "gcg needs nev >= 1 and tol > 0".into(),
        ));
    }
    if x0.dim() != p.dim() {
        return Err(PaseError::dims("gcg_aug_shifted", p.dim(), x0.dim()));
    }
    if x0.width() < n {
        return Err(PaseError::InvalidArgument(format!(
            "initial block has {} columns, need at least {n}",
            x0.width()
        )));
    }
    let owned;
    let k: &P = if p.shift() == theta {
        p
    } else {
        owned = p.with_shift(theta - p.shift())?;
        &owned
    };
    let dim = k.dim();
    let eye = IdentityOp(dim);
    let bop = BSide(k);

    let mut x = orthonormalize(x0, &eye, None, opts.drop_tol)?.q;
    let width = x.width();
    if width < n {
        return Err(PaseError::Degenerate(format!(
            "initial block has rank {width} below n = {n}"
        )));
    }
    let mut pblk = MultiVector::zeros(dim, 0);
    let mut history = Vec::new();
    let mut sweeps = 0;
    let mut normal_used = false;
    let mut mu_used = None;

    loop {
        // standard Rayleigh-Ritz on span(X) for values and residuals
        let vb = orthonormalize(&x, &bop, None, opts.drop_tol)?;
        let ay = k.apply_a(&vb.q)?;
        let h = checked_projection(&vb.q, &ay)?;
        let g = checked_projection(&vb.q, &vb.bq)?;
        let (nu_all, c) = dense_sym_geig(&h, &g, Selector::All)?;
        let order = stable_order(&nu_all, |a, b| a.abs().total_cmp(&b.abs()));
        let c = c.select_columns(&order);
        let nu: Vec<f64> = order.iter().map(|&i| nu_all[i]).collect();
        let y = vb.q.mul_dense(&c)?;
        let ky = ay.mul_dense(&c)?;
        let by = vb.bq.mul_dense(&c)?;
        let res = residual_norms(&ky, &by, &y, &nu, theta)?;
        let conv = res.iter().take(n).filter(|&&r| r <= opts.tol).count();
        history.push(SweepRecord {
            sweep: sweeps,
            ritz: nu.iter().map(|v| v + theta).collect(),
            residuals: res.clone(),
            mu: mu_used,
            normal_equations: normal_used,
            locked: conv,
        });
        let done = res.iter().take(n).all(|&r| r <= opts.tol);
        if done || sweeps >= opts.max_sweeps {
            let take = n.min(nu.len());
            let idx: Vec<usize> = (0..take).collect();
            return Ok(GcgResult {
                values: nu[..take].iter().map(|v| v + theta).collect(),
                vectors: y.select_columns(&idx),
                residuals: res[..take].to_vec(),
                converged: done,
                sweeps,
                history,
            });
        }
        sweeps += 1;

        let want: Vec<usize> = (0..y.width())
            .filter(|&j| j >= n || res[j] > opts.tol)
            .collect();
        let out = correction_block(k, &ky, &by, &nu, &want, 0.0, &opts.inner)?;
        normal_used = out.normal_equations;
        mu_used = Some(theta);
        let mut wblk = out.x;
        normalize_columns(&mut wblk);

        let cat = x.hcat(&pblk)?.hcat(&wblk)?;
        let v = orthonormalize(&cat, &eye, None, opts.drop_tol)?.q;
        let kv = k.apply_a(&v)?;
        let bv = k.apply_b(&v)?;
        let cands = harmonic_rayleigh_ritz(&kv, &bv, theta)?;
        let dirs = v.mul_dense(&cands)?;
        let x_new = orthonormalize(&dirs, &eye, None, opts.drop_tol)?.q;
        if x_new.width() < width {
            return Err(PaseError::Degenerate(format!(
                "harmonic directions span {} columns, need {width}",
                x_new.width()
            )));
        }
        let x_new = x_new.column_range(0, width);
        let coeffs = gram(&v, &x_new)?;
        pblk = complement_part(&v, &coeffs, x.width())?;
        x = x_new;
    }
}
