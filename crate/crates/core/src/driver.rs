//! The outer augmented-subspace iteration: coarse solve, fine smoothing,
//! augmented eigensolve and the batch scheme for many eigenpairs.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augmented::{assemble_augmented, AugmentedPencil, AugmentedVector, PrecondMode};
use crate::error::{PaseError, Result};
use crate::fem::{assemble, build_prolongation, Diffusion, FeSpace, Potential};
use crate::gcg::{gcg_aug, gcg_aug_shifted, GcgOptions};
use crate::linalg::multivec::dot;
use crate::linalg::ops::{gram, orthonormalize, DEFAULT_DROP_TOL};
use crate::linalg::{dense_sym_geig, DenseLu, DenseMatrix, MultiVector, Selector, SparseMatrix};
use crate::pencil::SparsePencil;
use crate::solvers::{block_cg, BcgConfig};

/// Coarse problems up to this size are solved densely.
pub const DENSE_COARSE_LIMIT: usize = 2000;
/// Selected candidates with a smaller component in the current span count as a
/// failed capture.
const CAPTURE_THRESHOLD: f64 = 0.5;
const MAX_OVERSAMPLE_RAISES: usize = 2;

/// Nested pencils `(A_H, B_H) ⊂ (A_h, B_h)` and the prolongation `I_H^h`.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub coarse_a: Arc<SparseMatrix>,
    pub coarse_b: Arc<SparseMatrix>,
    pub fine_a: Arc<SparseMatrix>,
    pub fine_b: Arc<SparseMatrix>,
    pub prolong: Arc<SparseMatrix>,
    pub restrict: Arc<SparseMatrix>,
}

impl Hierarchy {
    pub fn new(
        coarse_a: SparseMatrix,
        coarse_b: SparseMatrix,
        fine_a: SparseMatrix,
        fine_b: SparseMatrix,
        prolong: SparseMatrix,
    ) -> Result<Self> {
        let (nh, nf) = (prolong.ncols(), prolong.nrows());
        for (m, n, what) in [
            (&coarse_a, nh, "coarse A"),
            (&coarse_b, nh, "coarse B"),
            (&fine_a, nf, "fine A"),
            (&fine_b, nf, "fine B"),
        ] {
            if m.nrows() != n || m.ncols() != n {
                return Err(PaseError::InvalidArgument(format!(
                    "{what} is {}x{}, prolongation implies {n}x{n}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        let restrict = prolong.transpose();
        Ok(Hierarchy {
            coarse_a: Arc::new(coarse_a),
            coarse_b: Arc::new(coarse_b),
            fine_a: Arc::new(fine_a),
            fine_b: Arc::new(fine_b),
            prolong: Arc::new(prolong),
            restrict: Arc::new(restrict),
        })
    }

    /// Coarse pencil formed as `Iᵀ A_h I`, `Iᵀ B_h I`.
    pub fn galerkin(
        fine_a: SparseMatrix,
        fine_b: SparseMatrix,
        prolong: SparseMatrix,
    ) -> Result<Self> {
        let ca = fine_a.galerkin(&prolong)?;
        let cb = fine_b.galerkin(&prolong)?;
        Self::new(ca, cb, fine_a, fine_b, prolong)
    }

    /// Assemble on the fine space and project onto the coarse one, so the coarse
    /// pencil is exactly the restriction of the fine bilinear forms.
    pub fn from_spaces(
        coarse: &FeSpace,
        fine: &FeSpace,
        diffusion: &Diffusion,
        potential: &Potential,
    ) -> Result<Self> {
        let p = build_prolongation(coarse, fine)?;
        let (a, b) = assemble(fine, diffusion, potential)?;
        Self::galerkin(a, b, p)
    }

    pub fn coarse_dim(&self) -> usize {
        self.coarse_a.nrows()
    }

    pub fn fine_dim(&self) -> usize {
        self.fine_a.nrows()
    }

    /// `max(‖IᵀA_hI − A_H‖, ‖IᵀB_hI − B_H‖)`, entrywise.
    pub fn galerkin_defect(&self) -> Result<f64> {
        let da = self
            .fine_a
            .galerkin(&self.prolong)?
            .add_scaled(-1.0, &self.coarse_a)?
            .max_abs();
        let db = self
            .fine_b
            .galerkin(&self.prolong)?
            .add_scaled(-1.0, &self.coarse_b)?
            .max_abs();
        Ok(da.max(db))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShiftSign {
    /// `θ = (λ_m + λ_{m+k−1}) / 2`
    Plus,
    /// `θ = (λ_m − λ_{m+k−1}) / 2`
    Minus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub batch_sizes: Vec<usize>,
    /// `n − k_i`; `None` means `max(2, ⌈k_i/4⌉)`
    pub oversample: Option<usize>,
    pub shift_sign: ShiftSign,
}

impl BatchConfig {
    pub fn new(batch_sizes: Vec<usize>) -> Self {
        BatchConfig {
            batch_sizes,
            oversample: None,
            shift_sign: ShiftSign::Plus,
        }
    }

    pub fn oversample_for(&self, k: usize) -> usize {
        self.oversample.unwrap_or_else(|| 2.max(k.div_ceil(4)))
    }

    pub fn validate(&self, nev: usize) -> Result<()> {
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return Err(PaseError::InvalidArgument(
                "batch sizes must be positive".into(),
            ));
        }
        if self.batch_sizes.iter().sum::<usize>() != nev {
            return Err(PaseError::InvalidArgument(format!(
                "batch sizes {:?} do not sum to nev = {nev}",
                self.batch_sizes
            )));
        }
        if self.oversample == Some(0) {
            return Err(PaseError::InvalidArgument(
                "oversample must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaseConfig {
    pub nev: usize,
    pub tol: f64,
    pub max_outer: usize,
    /// pre- and post-smoothing solves on the fine pencil
    pub cg: BcgConfig,
    pub precond_mode: PrecondMode,
    pub batch: Option<BatchConfig>,
    /// sweep cap of the augmented eigensolver per outer iteration
    pub aug_max_sweeps: usize,
    pub seed: u64,
}

impl PaseConfig {
    pub fn new(nev: usize) -> Self {
        PaseConfig {
            nev,
            tol: 1e-8,
            max_outer: 30,
            cg: BcgConfig::default(),
            precond_mode: PrecondMode::None,
            batch: None,
            aug_max_sweeps: 200,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nev == 0 {
            return Err(PaseError::InvalidArgument("nev must be at least 1".into()));
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(PaseError::InvalidArgument(format!(
                "tol {} outside (0, 1)",
                self.tol
            )));
        }
        if self.max_outer == 0 || self.cg.max_iters == 0 || !(self.cg.rel_tol > 0.0) {
            return Err(PaseError::InvalidArgument(
                "max_outer, cg.max_iters and cg.rel_tol must be positive".into(),
            ));
        }
        if let Some(b) = &self.batch {
            b.validate(self.nev)?;
        }
        Ok(())
    }

    fn aug_options(&self, nev: usize) -> GcgOptions {
        GcgOptions {
            nev,
            tol: self.tol / 10.0,
            max_sweeps: self.aug_max_sweeps,
            inner: self.cg,
            drop_tol: DEFAULT_DROP_TOL,
        }
    }
}

/// Residual trajectory of one outer solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// `[outer iteration][pair]` criterion values; row 0 is the interpolated coarse start
    pub residual_history: Vec<Vec<f64>>,
    pub value_history: Vec<Vec<f64>>,
    pub outer_iterations: usize,
    /// per pair, geometric mean of successive residual ratios
    pub contraction_factors: Vec<f64>,
    /// the same for the largest residual over all pairs
    pub contraction_factor: f64,
    pub final_values: Vec<f64>,
    pub converged: Vec<bool>,
    /// augmented eigensolver sweeps per outer iteration
    pub aug_sweeps: Vec<usize>,
    /// outer iterations in which an inner solve fell back to normal equations
    pub normal_equation_iterations: usize,
}

impl ConvergenceReport {
    pub fn all_converged(&self) -> bool {
        self.converged.iter().all(|&c| c)
    }
}

#[derive(Debug, Clone)]
pub struct PaseOutput {
    pub values: Vec<f64>,
    pub vectors: MultiVector,
    pub report: ConvergenceReport,
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub values: Vec<f64>,
    pub vectors: MultiVector,
    pub reports: Vec<ConvergenceReport>,
    pub thetas: Vec<f64>,
    /// `n` finally used by each batch
    pub candidates: Vec<usize>,
}

impl BatchOutput {
    pub fn all_converged(&self) -> bool {
        self.reports.iter().all(|r| r.all_converged())
    }
}

/// `‖A_h x − λ B_h x‖₂ / (|λ| ‖x‖_B)` per column.
pub fn fine_residuals(
    a: &SparseMatrix,
    b: &SparseMatrix,
    values: &[f64],
    u: &MultiVector,
) -> Result<Vec<f64>> {
    if values.len() != u.width() {
        return Err(PaseError::dims("fine_residuals", u.width(), values.len()));
    }
    let au = a.spmv(u)?;
    let bu = b.spmv(u)?;
    let mut out = Vec::with_capacity(values.len());
    for (j, &lambda) in values.iter().enumerate() {
        if lambda == 0.0 {
            return Err(PaseError::CriterionUndefined { column: j });
        }
        let xb = dot(u.col(j), bu.col(j)).max(0.0).sqrt();
        let r = au
            .col(j)
            .iter()
            .zip(bu.col(j))
            .map(|(x, y)| (x - lambda * y).powi(2))
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

/// Per-column flag of `‖A_h x − λ B_h x‖₂ / |λ| ≤ tol`.
pub fn check_convergence(
    a: &SparseMatrix,
    b: &SparseMatrix,
    values: &[f64],
    u: &MultiVector,
    tol: f64,
) -> Result<Vec<bool>> {
    Ok(fine_residuals(a, b, values, u)?
        .into_iter()
        .map(|r| r <= tol)
        .collect())
}

/// `θ` for the batch covering indices `m .. m + k` (0-based) of the coarse spectrum.
pub fn compute_batch_shift(
    coarse_values: &[f64],
    m: usize,
    k: usize,
    sign: ShiftSign,
) -> Result<f64> {
    if k == 0 || m + k > coarse_values.len() {
        return Err(PaseError::InvalidArgument(format!(
            "batch {m}..{} outside the {} available coarse eigenvalues",
            m + k,
            coarse_values.len()
        )));
    }
    let (lo, hi) = (coarse_values[m], coarse_values[m + k - 1]);
    Ok(match sign {
        ShiftSign::Plus => 0.5 * (lo + hi),
        ShiftSign::Minus => 0.5 * (lo - hi),
    })
}

/// Squared B-norms of the projections of the candidates onto `span(Û)`:
/// `X β = u_Hᵀ b_h + γᵀ β`, score `X(i,:) β X(i,:)ᵀ`.
pub fn component_scores(
    candidates: &AugmentedVector,
    b_h: &MultiVector,
    beta: &DenseMatrix,
) -> Result<Vec<f64>> {
    let k = beta.nrows();
    if candidates.gamma.nrows() != k || b_h.width() != k {
        return Err(PaseError::dims(
            "component_scores",
            k,
            candidates.gamma.nrows(),
        ));
    }
    let rhs =
        gram(&candidates.u_h, b_h)?.add_scaled(1.0, &candidates.gamma.transpose().matmul(beta)?)?;
    let bt = beta.transpose();
    let lut = DenseLu::new(&bt).map_err(|_| PaseError::Degenerate("β is singular".into()))?;
    let mut scores = Vec::with_capacity(rhs.nrows());
    for i in 0..rhs.nrows() {
        // row i of X solves x β = rhs(i,:), i.e. βᵀ xᵀ = rhs(i,:)ᵀ
        let x = lut.solve(rhs.row(i));
        let bx = beta.matvec(&x);
        scores.push(x.iter().zip(&bx).map(|(a, b)| a * b).sum());
    }
    Ok(scores)
}

/// Indices of the `k` candidates with the largest component in `span(Û)`
/// (ties to the lower index), together with all scores.
pub fn select_by_component(
    candidates: &AugmentedVector,
    pencil: &AugmentedPencil,
    k: usize,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let scores = component_scores(candidates, pencil.b_h(), pencil.beta())?;
    if k > scores.len() {
        return Err(PaseError::InvalidArgument(format!(
            "cannot select {k} of {} candidates",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    idx.truncate(k);
    idx.sort_unstable();
    Ok((idx, scores))
}

/// The smallest `count` eigenpairs of the coarse pencil.
pub fn coarse_eigenpairs(
    hier: &Hierarchy,
    count: usize,
    cfg: &PaseConfig,
) -> Result<(Vec<f64>, MultiVector)> {
    let n = hier.coarse_dim();
    let count = count.min(n);
    if n <= DENSE_COARSE_LIMIT {
        let (vals, vecs) = dense_sym_geig(
            &hier.coarse_a.to_dense(),
            &hier.coarse_b.to_dense(),
            Selector::Smallest(count),
        )?;
        let cols: Vec<Vec<f64>> = (0..vecs.ncols()).map(|j| vecs.column(j)).collect();
        return Ok((vals, MultiVector::from_columns(n, &cols)));
    }
    let pencil = SparsePencil::from_arcs(Arc::clone(&hier.coarse_a), Arc::clone(&hier.coarse_b))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let guard = 2.max(count / 4);
    let x0 = MultiVector::random(n, (count + guard).min(n), &mut rng);
    let opts = GcgOptions {
        max_sweeps: 500,
        ..GcgOptions::new(count, cfg.tol)
    };
    let out = gcg_aug(&pencil, &x0, &opts)?;
    Ok((out.values, out.vectors))
}

/// Fine-space Rayleigh-Ritz on `span(U)`: ascending values, B-orthonormal vectors.
fn fine_rayleigh_ritz(hier: &Hierarchy, u: &MultiVector) -> Result<(Vec<f64>, MultiVector)> {
    let basis = orthonormalize(u, hier.fine_b.as_ref(), None, DEFAULT_DROP_TOL)?;
    if basis.width() < u.width() {
        return Err(PaseError::Degenerate(format!(
            "fine block collapsed to rank {} of {}",
            basis.width(),
            u.width()
        )));
    }
    let av = hier.fine_a.spmv(&basis.q)?;
    let mut h = gram(&basis.q, &av)?;
    h.symmetrize();
    let mut g = gram(&basis.q, &basis.bq)?;
    g.symmetrize();
    let (vals, c) = dense_sym_geig(&h, &g, Selector::All)?;
    Ok((vals, basis.q.mul_dense(&c)?))
}

/// `A_h Û = B_h U Λ` from `U` on the columns not `locked`, then
/// B-orthonormalization of `Û`.
fn presmooth(
    hier: &Hierarchy,
    values: &[f64],
    u: &MultiVector,
    locked: &[bool],
    cfg: &PaseConfig,
) -> Result<MultiVector> {
    let active: Vec<usize> = (0..u.width())
        .filter(|&j| !locked.get(j).copied().unwrap_or(false))
        .collect();
    let mut smoothed = u.clone();
    if !active.is_empty() {
        let ua = u.select_columns(&active);
        let mut rhs = hier.fine_b.spmv(&ua)?;
        rhs.scale_columns(&active.iter().map(|&j| values[j]).collect::<Vec<_>>());
        let x = block_cg(&hier.fine_a, None, &rhs, &ua, &cfg.cg)?.x;
        for (c, &j) in active.iter().enumerate() {
            smoothed.col_mut(j).copy_from_slice(x.col(c));
        }
    }
    let basis = orthonormalize(&smoothed, hier.fine_b.as_ref(), None, DEFAULT_DROP_TOL)?;
    if basis.width() < u.width() {
        return Err(PaseError::Degenerate(format!(
            "augmenting block has rank {} after smoothing, expected {}",
            basis.width(),
            u.width()
        )));
    }
    Ok(basis.q)
}

fn combine(hier: &Hierarchy, u_hat: &MultiVector, sol: &AugmentedVector) -> Result<MultiVector> {
    let mut u = hier.prolong.spmv(&sol.u_h)?;
    u.axpy(1.0, &u_hat.mul_dense(&sol.gamma)?)?;
    Ok(u)
}

fn postsmooth(
    hier: &Hierarchy,
    u: &MultiVector,
    values: &[f64],
    cfg: &PaseConfig,
) -> Result<MultiVector> {
    let mut rhs = hier.fine_b.spmv(u)?;
    rhs.scale_columns(values);
    Ok(block_cg(&hier.fine_a, None, &rhs, u, &cfg.cg)?.x)
}

/// `I u_H + Û γ`, postsmoothed with `A_h U = B_h Ũ Λ`, then Rayleigh-Ritz.
fn combine_and_postsmooth(
    hier: &Hierarchy,
    u_hat: &MultiVector,
    sol: &AugmentedVector,
    values: &[f64],
    cfg: &PaseConfig,
) -> Result<(Vec<f64>, MultiVector)> {
    let u = combine(hier, u_hat, sol)?;
    fine_rayleigh_ritz(hier, &postsmooth(hier, &u, values, cfg)?)
}

/// Matches each locked column of `(old_values, old)` with the new candidate it
/// overlaps most in the B inner product and keeps the old pair there; the other
/// candidates are postsmoothed. Output is sorted by value.
fn merge_locked(
    hier: &Hierarchy,
    new: MultiVector,
    new_values: &[f64],
    old: &MultiVector,
    old_values: &[f64],
    locked: &[bool],
    cfg: &PaseConfig,
) -> Result<(Vec<f64>, MultiVector)> {
    let k = new.width();
    let lock_idx: Vec<usize> = (0..old.width())
        .filter(|&j| locked.get(j).copied().unwrap_or(false))
        .collect();
    let mut taken = vec![None; k];
    if !lock_idx.is_empty() {
        let bn = hier.fine_b.spmv(&new)?;
        let norms: Vec<f64> = (0..k)
            .map(|c| dot(new.col(c), bn.col(c)).max(f64::MIN_POSITIVE).sqrt())
            .collect();
        let overlap = gram(&old.select_columns(&lock_idx), &bn)?;
        for (r, &j) in lock_idx.iter().enumerate() {
            let best = (0..k).filter(|&c| taken[c].is_none()).max_by(|&a, &b| {
                (overlap.get(r, a).abs() / norms[a])
                    .total_cmp(&(overlap.get(r, b).abs() / norms[b]))
                    .then(b.cmp(&a))
            });
            if let Some(c) = best {
                taken[c] = Some(j);
            }
        }
    }
    let free: Vec<usize> = (0..k).filter(|&c| taken[c].is_none()).collect();
    let mut pairs: Vec<(f64, Vec<f64>)> = Vec::with_capacity(k);
    if !free.is_empty() {
        let fv: Vec<f64> = free.iter().map(|&c| new_values[c]).collect();
        let smoothed = postsmooth(hier, &new.select_columns(&free), &fv, cfg)?;
        let (vals, vecs) = rayleigh_quotients(hier, smoothed)?;
        pairs.extend(vals.into_iter().zip(vecs.columns().map(|c| c.to_vec())));
    }
    for j in taken.iter().flatten() {
        pairs.push((old_values[*j], old.col(*j).to_vec()));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let cols: Vec<Vec<f64>> = pairs.iter().map(|p| p.1.clone()).collect();
    Ok((
        pairs.into_iter().map(|p| p.0).collect(),
        MultiVector::from_columns(old.dim(), &cols),
    ))
}

/// Per-column B-normalization and Rayleigh quotients, without mixing columns.
fn rayleigh_quotients(hier: &Hierarchy, mut u: MultiVector) -> Result<(Vec<f64>, MultiVector)> {
    let au = hier.fine_a.spmv(&u)?;
    let bu = hier.fine_b.spmv(&u)?;
    let mut vals = Vec::with_capacity(u.width());
    for j in 0..u.width() {
        let ub = dot(u.col(j), bu.col(j));
        if !(ub > 0.0) {
            return Err(PaseError::Degenerate(format!(
                "column {j} vanished after smoothing"
            )));
        }
        vals.push(dot(u.col(j), au.col(j)) / ub);
        let s = 1.0 / ub.sqrt();
        u.col_mut(j).iter_mut().for_each(|x| *x *= s);
    }
    Ok((vals, u))
}

/// Result of one outer correction.
#[derive(Debug, Clone)]
pub struct CorrectionOutcome {
    pub values: Vec<f64>,
    pub vectors: MultiVector,
    pub aug_sweeps: usize,
    pub normal_equations: bool,
    /// component scores of the selected candidates (shifted corrections only)
    pub scores: Option<Vec<f64>>,
}

fn build_pencil(hier: &Hierarchy, u_hat: &MultiVector) -> Result<AugmentedPencil> {
    assemble_augmented(
        Arc::clone(&hier.coarse_a),
        Arc::clone(&hier.coarse_b),
        &hier.fine_a,
        &hier.fine_b,
        &hier.restrict,
        u_hat,
    )
}

/// One correction for the `k = U.width()` smallest eigenpairs.
pub fn correction_step(
    hier: &Hierarchy,
    values: &[f64],
    u: &MultiVector,
    cfg: &PaseConfig,
) -> Result<CorrectionOutcome> {
    let k = u.width();
    if values.len() != k || k == 0 {
        return Err(PaseError::dims("correction_step", k, values.len()));
    }
    let u_hat = presmooth(hier, values, u, &[], cfg)?;
    let pencil = build_pencil(hier, &u_hat)?;
    let (tp, td) = pencil.precond_transform(cfg.precond_mode)?;
    let x0 = AugmentedVector::new(
        MultiVector::zeros(hier.coarse_dim(), k),
        DenseMatrix::identity(k),
    )?;
    let x0 = td.forward_transform(&x0)?.to_stacked();
    let out = gcg_aug(&tp, &x0, &cfg.aug_options(k))?;
    let sol = td.back_transform(&AugmentedVector::from_stacked(
        &out.vectors,
        hier.coarse_dim(),
    )?)?;
    let (vals, vecs) = combine_and_postsmooth(hier, &u_hat, &sol, &out.values, cfg)?;
    Ok(CorrectionOutcome {
        values: vals,
        vectors: vecs,
        aug_sweeps: out.sweeps,
        normal_equations: out.history.iter().any(|h| h.normal_equations),
        scores: None,
    })
}

/// One correction for an interior batch: the `n` augmented eigenpairs nearest
/// `theta`, of which the `k` with the largest component in `span(Û)` are kept.
/// `pad` supplies at least `n − k` coarse vectors that fill the initial block
/// beyond `k`; any further ones act as unchecked guard columns. Columns flagged
/// in `locked` are kept as they are: they are neither smoothed nor replaced.
#[allow(clippy::too_many_arguments)]
pub fn correction_step_shifted(
    hier: &Hierarchy,
    values: &[f64],
    u: &MultiVector,
    locked: &[bool],
    theta: f64,
    n: usize,
    pad: &MultiVector,
    cfg: &PaseConfig,
) -> Result<CorrectionOutcome> {
    let k = u.width();
    if values.len() != k || k == 0 {
        return Err(PaseError::dims("correction_step_shifted", k, values.len()));
    }
    if n < k || pad.width() < n - k {
        return Err(PaseError::InvalidArgument(format!(
            "need n >= k and {} padding vectors, got n = {n}, k = {k}, {} padding vectors",
            n.saturating_sub(k),
            pad.width()
        )));
    }
    let u_hat = presmooth(hier, values, u, locked, cfg)?;
    let pencil = build_pencil(hier, &u_hat)?;
    let shifted = pencil.apply_shift(theta)?;
    let (tp, td) = shifted.precond_transform(cfg.precond_mode)?;

    let nh = hier.coarse_dim();
    let mut u0 = MultiVector::zeros(nh, k);
    let mut g0 = DenseMatrix::identity(k);
    for c in pad.columns() {
        u0.push_column(c);
    }
    if pad.width() > 0 {
        g0 = g0.hcat(&DenseMatrix::zeros(k, pad.width()))?;
    }
    let x0 = td
        .forward_transform(&AugmentedVector::new(u0, g0)?)?
        .to_stacked();
    let out = gcg_aug_shifted(&tp, theta, &x0, &cfg.aug_options(n))?;
    let cand = td.back_transform(&AugmentedVector::from_stacked(&out.vectors, nh)?)?;
    let (sel, scores) = select_by_component(&cand, &pencil, k)?;
    let mut order = sel.clone();
    order.sort_by(|&i, &j| out.values[i].total_cmp(&out.values[j]).then(i.cmp(&j)));
    let chosen = AugmentedVector::new(
        cand.u_h.select_columns(&order),
        cand.gamma.select_columns(&order),
    )?;
    let chosen_values: Vec<f64> = order.iter().map(|&i| out.values[i]).collect();
    let combined = combine(hier, &u_hat, &chosen)?;
    let (vals, vecs) = merge_locked(hier, combined, &chosen_values, u, values, locked, cfg)?;
    Ok(CorrectionOutcome {
        values: vals,
        vectors: vecs,
        aug_sweeps: out.sweeps,
        normal_equations: out.history.iter().any(|h| h.normal_equations),
        scores: Some(order.iter().map(|&i| scores[i]).collect()),
    })
}

fn geometric_mean_ratio(series: &[f64], tol: f64) -> f64 {
    // skip the first correction (from the interpolated coarse start); stop once converged
    let mut logs = Vec::new();
    for l in 2..series.len() {
        let (prev, cur) = (series[l - 1], series[l]);
        if !(prev > tol) || !(prev > 0.0) || !(cur > 0.0) {
            break;
        }
        logs.push((cur / prev).ln());
    }
    if logs.is_empty() && series.len() >= 2 && series[0] > 0.0 && series[1] > 0.0 {
        logs.push((series[1] / series[0]).ln());
    }
    if logs.is_empty() {
        return f64::NAN;
    }
    (logs.iter().sum::<f64>() / logs.len() as f64).exp()
}

fn build_report(
    residual_history: Vec<Vec<f64>>,
    value_history: Vec<Vec<f64>>,
    aug_sweeps: Vec<usize>,
    normal_eq: usize,
    tol: f64,
) -> ConvergenceReport {
    let k = residual_history.first().map(|r| r.len()).unwrap_or(0);
    let contraction_factors = (0..k)
        .map(|j| {
            let s: Vec<f64> = residual_history.iter().map(|r| r[j]).collect();
            geometric_mean_ratio(&s, tol)
        })
        .collect();
    let maxes: Vec<f64> = residual_history
        .iter()
        .map(|r| r.iter().copied().fold(0.0, f64::max))
        .collect();
    let last = residual_history.last().cloned().unwrap_or_default();
    ConvergenceReport {
        outer_iterations: residual_history.len().saturating_sub(1),
        contraction_factor: geometric_mean_ratio(&maxes, tol),
        contraction_factors,
        final_values: value_history.last().cloned().unwrap_or_default(),
        converged: last.iter().map(|&r| r <= tol).collect(),
        residual_history,
        value_history,
        aug_sweeps,
        normal_equation_iterations: normal_eq,
    }
}

/// Outer loop from a fine starting block, with a caller-chosen correction.
fn outer_loop(
    hier: &Hierarchy,
    values: Vec<f64>,
    u: MultiVector,
    cfg: &PaseConfig,
    mut step: impl FnMut(&[f64], &MultiVector, &[bool]) -> Result<CorrectionOutcome>,
) -> Result<PaseOutput> {
    let mut values = values;
    let mut u = u;
    let mut res = fine_residuals(&hier.fine_a, &hier.fine_b, &values, &u)?;
    let mut residual_history = vec![res.clone()];
    let mut value_history = vec![values.clone()];
    let mut sweeps = Vec::new();
    let mut normal = 0;
    for _ in 0..cfg.max_outer {
        if res.iter().all(|&r| r <= cfg.tol) {
            break;
        }
        let locked: Vec<bool> = res.iter().map(|&r| r <= cfg.tol).collect();
        let out = step(&values, &u, &locked)?;
        values = out.values;
        u = out.vectors;
        sweeps.push(out.aug_sweeps);
        normal += usize::from(out.normal_equations);
        res = fine_residuals(&hier.fine_a, &hier.fine_b, &values, &u)?;
        residual_history.push(res.clone());
        value_history.push(values.clone());
    }
    let report = build_report(residual_history, value_history, sweeps, normal, cfg.tol);
    Ok(PaseOutput {
        values,
        vectors: u,
        report,
    })
}

/// The smallest `cfg.nev` eigenpairs of the fine pencil.
pub fn pase_solve(hier: &Hierarchy, cfg: &PaseConfig) -> Result<PaseOutput> {
    cfg.validate()?;
    if cfg.nev > hier.coarse_dim() {
        return Err(PaseError::InvalidArgument(format!(
            "nev = {} exceeds the coarse dimension {}",
            cfg.nev,
            hier.coarse_dim()
        )));
    }
    let (cvals, cvecs) = coarse_eigenpairs(hier, cfg.nev, cfg)?;
    let u0 = hier.prolong.spmv(&cvecs)?;
    outer_loop(hier, cvals, u0, cfg, |l, u, _| {
        correction_step(hier, l, u, cfg)
    })
}

/// `pase_solve` from a given fine starting block instead of the interpolated
/// coarse eigenvectors. `u0` is B-orthonormalized and Rayleigh-Ritz projected first.
pub fn pase_solve_from(hier: &Hierarchy, u0: &MultiVector, cfg: &PaseConfig) -> Result<PaseOutput> {
    cfg.validate()?;
    if u0.width() != cfg.nev || u0.dim() != hier.fine_dim() {
        return Err(PaseError::dims("pase_solve_from", cfg.nev, u0.width()));
    }
    let (values, u) = fine_rayleigh_ritz(hier, u0)?;
    outer_loop(hier, values, u, cfg, |l, u, _| {
        correction_step(hier, l, u, cfg)
    })
}

/// Extra unchecked columns carried by the shifted solver for `n` wanted pairs.
fn guard_columns(n: usize) -> usize {
    2.max(n.div_ceil(4))
}

/// Coarse eigenvectors nearest `theta`, skipping the batch's own indices.
fn padding_vectors(
    cvals: &[f64],
    cvecs: &MultiVector,
    theta: f64,
    skip: std::ops::Range<usize>,
    count: usize,
) -> MultiVector {
    let mut idx: Vec<usize> = (0..cvals.len()).filter(|i| !skip.contains(i)).collect();
    idx.sort_by(|&i, &j| {
        (cvals[i] - theta)
            .abs()
            .total_cmp(&(cvals[j] - theta).abs())
            .then(i.cmp(&j))
    });
    idx.truncate(count);
    cvecs.select_columns(&idx)
}

/// The batch scheme: the first `cfg.nev` eigenpairs computed batch by batch.
pub fn batch_solve(hier: &Hierarchy, cfg: &PaseConfig) -> Result<BatchOutput> {
    cfg.validate()?;
    let batch = cfg
        .batch
        .clone()
        .unwrap_or_else(|| BatchConfig::new(vec![cfg.nev]));
    batch.validate(cfg.nev)?;
    let max_over = batch
        .batch_sizes
        .iter()
        .map(|&k| batch.oversample_for(k) << MAX_OVERSAMPLE_RAISES)
        .max()
        .unwrap_or(0);
    let needed = cfg.nev + max_over + guard_columns(cfg.nev + max_over);
    if cfg.nev > hier.coarse_dim() {
        return Err(PaseError::InvalidArgument(format!(
            "nev = {} exceeds the coarse dimension {}",
            cfg.nev,
            hier.coarse_dim()
        )));
    }
    let (cvals, cvecs) = coarse_eigenpairs(hier, needed, cfg)?;
    let starts: Vec<usize> = batch
        .batch_sizes
        .iter()
        .scan(0, |acc, &k| {
            let s = *acc;
            *acc += k;
            Some(s)
        })
        .collect();

    let results: Vec<Result<(PaseOutput, f64, usize)>> = starts
        .par_iter()
        .zip(batch.batch_sizes.par_iter())
        .enumerate()
        .map(|(bi, (&m, &k))| run_batch(hier, cfg, &batch, &cvals, &cvecs, bi, m, k))
        .collect();

    let mut values = Vec::with_capacity(cfg.nev);
    let mut vectors = MultiVector::zeros(hier.fine_dim(), 0);
    let mut reports = Vec::new();
    let mut thetas = Vec::new();
    let mut candidates = Vec::new();
    for r in results {
        let (out, theta, n) = r?;
        values.extend_from_slice(&out.values);
        for c in out.vectors.columns() {
            vectors.push_column(c);
        }
        reports.push(out.report);
        thetas.push(theta);
        candidates.push(n);
    }
    Ok(BatchOutput {
        values,
        vectors,
        reports,
        thetas,
        candidates,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_batch(
    hier: &Hierarchy,
    cfg: &PaseConfig,
    batch: &BatchConfig,
    cvals: &[f64],
    cvecs: &MultiVector,
    index: usize,
    m: usize,
    k: usize,
) -> Result<(PaseOutput, f64, usize)> {
    let theta = compute_batch_shift(cvals, m, k, batch.shift_sign)?;
    let cols: Vec<usize> = (m..m + k).collect();
    let u0 = hier.prolong.spmv(&cvecs.select_columns(&cols))?;
    let v0 = cvals[m..m + k].to_vec();
    if index == 0 {
        let out = outer_loop(hier, v0, u0, cfg, |l, u, _| {
            correction_step(hier, l, u, cfg)
        })?;
        return Ok((out, theta, k));
    }
    let mut extra = batch.oversample_for(k);
    let mut worst = f64::NAN;
    for _ in 0..=MAX_OVERSAMPLE_RAISES {
        let n = (k + extra).min(hier.coarse_dim() + k);
        let pad = padding_vectors(cvals, cvecs, theta, m..m + k, n - k + guard_columns(n));
        let mut captured = true;
        let attempt = outer_loop(hier, v0.clone(), u0.clone(), cfg, |l, u, locked| {
            let out = correction_step_shifted(hier, l, u, locked, theta, n, &pad, cfg)?;
            let min = out
                .scores
                .as_ref()
                .map(|s| s.iter().copied().fold(f64::INFINITY, f64::min))
                .unwrap_or(1.0);
            if min < CAPTURE_THRESHOLD {
                captured = false;
                worst = min;
                return Err(PaseError::CaptureFailure {
                    batch: index,
                    score: min,
                });
            }
            Ok(out)
        });
        match attempt {
            Ok(out) => return Ok((out, theta, n)),
            Err(PaseError::CaptureFailure { .. }) if !captured => extra *= 2,
            Err(e) => return Err(e),
        }
    }
    Err(PaseError::CaptureFailure {
        batch: index,
        score: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{build_unit_square_mesh, refine_uniform};

    fn square(nc: usize, levels: usize) -> Hierarchy {
        let cm = build_unit_square_mesh(nc).unwrap();
        let mut fm = cm.clone();
        for _ in 0..levels {
            fm = refine_uniform(&fm);
        }
        Hierarchy::from_spaces(
            &FeSpace::new(cm),
            &FeSpace::new(fm),
            &Diffusion::Identity,
            &Potential::Zero,
        )
        .unwrap()
    }

    fn dense_oracle(h: &Hierarchy, k: usize) -> Vec<f64> {
        dense_sym_geig(
            &h.fine_a.to_dense(),
            &h.fine_b.to_dense(),
            Selector::Smallest(k),
        )
        .unwrap()
        .0
    }

    #[test]
    fn batch_shift_cases() {
        let l = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(compute_batch_shift(&l, 1, 2, ShiftSign::Plus).unwrap(), 2.5);
        assert_eq!(compute_batch_shift(&l, 2, 1, ShiftSign::Plus).unwrap(), 3.0);
        assert_eq!(
            compute_batch_shift(&l, 1, 2, ShiftSign::Minus).unwrap(),
            -0.5
        );
        assert!(compute_batch_shift(&l, 3, 2, ShiftSign::Plus).is_err());
    }

    #[test]
    fn tiny_problem_matches_dense() {
        let h = square(2, 1);
        assert_eq!(h.fine_dim(), 9);
        let cfg = PaseConfig::new(1);
        let out = pase_solve(&h, &cfg).unwrap();
        let exact = dense_oracle(&h, 1);
        assert!(out.report.all_converged());
        assert!((out.values[0] - exact[0]).abs() < 1e-9 * exact[0]);
    }

    #[test]
    fn small_square_matches_dense() {
        let h = square(4, 2);
        let cfg = PaseConfig::new(4);
        let out = pase_solve(&h, &cfg).unwrap();
        assert!(
            out.report.all_converged(),
            "{:?}",
            out.report.residual_history
        );
        for (v, e) in out.values.iter().zip(dense_oracle(&h, 4)) {
            assert!((v - e).abs() < 1e-8 * e, "{v} vs {e}");
        }
    }

    #[test]
    fn correction_reduces_residuals() {
        let h = square(4, 1);
        let cfg = PaseConfig::new(4);
        let (cv, cu) = coarse_eigenpairs(&h, 4, &cfg).unwrap();
        let u0 = h.prolong.spmv(&cu).unwrap();
        let r0 = fine_residuals(&h.fine_a, &h.fine_b, &cv, &u0).unwrap();
        let out = correction_step(&h, &cv, &u0, &cfg).unwrap();
        let r1 = fine_residuals(&h.fine_a, &h.fine_b, &out.values, &out.vectors).unwrap();
        for (a, b) in r0.iter().zip(&r1) {
            assert!(b < a);
        }
        for (a, b) in cv.iter().zip(&out.values) {
            assert!(b <= &(a * (1.0 + 1e-12)));
        }
    }

    #[test]
    fn same_space_converges_in_one_iteration() {
        let m = build_unit_square_mesh(6).unwrap();
        let s = FeSpace::new(m);
        let (a, b) = assemble(&s, &Diffusion::Identity, &Potential::Zero).unwrap();
        let n = a.nrows();
        let h = Hierarchy::galerkin(a, b, SparseMatrix::identity(n)).unwrap();
        let out = pase_solve(&h, &PaseConfig::new(3)).unwrap();
        assert!(out.report.all_converged());
        assert!(out.report.outer_iterations <= 1);
    }

    #[test]
    fn convergence_flags() {
        let h = square(4, 1);
        let (vals, vecs) = dense_sym_geig(
            &h.fine_a.to_dense(),
            &h.fine_b.to_dense(),
            Selector::Smallest(2),
        )
        .unwrap();
        let cols: Vec<Vec<f64>> = (0..2).map(|j| vecs.column(j)).collect();
        let u = MultiVector::from_columns(h.fine_dim(), &cols);
        assert_eq!(
            check_convergence(&h.fine_a, &h.fine_b, &vals, &u, 1e-8).unwrap(),
            vec![true, true]
        );
        let mut scaled = u.clone();
        scaled.scale(2.0);
        assert_eq!(
            check_convergence(&h.fine_a, &h.fine_b, &vals, &scaled, 1e-8).unwrap(),
            vec![true, true]
        );
        let mut noisy = u.clone();
        for (i, x) in noisy.as_mut_slice().iter_mut().enumerate() {
            *x += 1e-3 * ((i * 7919 % 13) as f64 - 6.0);
        }
        assert_eq!(
            check_convergence(&h.fine_a, &h.fine_b, &vals, &noisy, 1e-8).unwrap(),
            vec![false, false]
        );
        assert!(matches!(
            check_convergence(&h.fine_a, &h.fine_b, &[0.0, 1.0], &u, 1e-8),
            Err(PaseError::CriterionUndefined { column: 0 })
        ));
    }

    #[test]
    fn pure_span_candidate_scores() {
        let beta = DenseMatrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]);
        let b_h = MultiVector::from_columns(3, &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let cand = AugmentedVector::new(
            MultiVector::zeros(3, 2),
            DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
        )
        .unwrap();
        let s = component_scores(&cand, &b_h, &beta).unwrap();
        assert!((s[0] - 2.0).abs() < 1e-14 && (s[1] - 1.0).abs() < 1e-14);
    }
}
