//! The augmented pencil on `V_H + span(Û)`, stored as a sparse coarse corner,
//! coupling blocks and small dense blocks.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{PaseError, Result};
use crate::linalg::dense::cholesky_psd;
use crate::linalg::ops::{gram, LinearOperator, Shifted};
use crate::linalg::{DenseLu, DenseMatrix, MultiVector, SparseCholesky, SparseMatrix};
use crate::pencil::{default_shifted_solve, Pencil, ShiftSolve};
use crate::solvers::{block_cg_op, cgnr, BcgConfig};

/// Largest coarse dimension for which an indefinite coarse corner is factored densely.
const DENSE_LU_LIMIT: usize = 4000;

/// Congruence applied to decouple one side of the pencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PrecondMode {
    #[serde(rename = "none")]
    None,
    A,
    B,
    #[serde(rename = "B-A")]
    BA,
}

impl PrecondMode {
    pub const ALL: [PrecondMode; 4] = [
        PrecondMode::None,
        PrecondMode::A,
        PrecondMode::B,
        PrecondMode::BA,
    ];
}

impl fmt::Display for PrecondMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrecondMode::None => "none",
            PrecondMode::A => "A",
            PrecondMode::B => "B",
            PrecondMode::BA => "B-A",
        })
    }
}

impl FromStr for PrecondMode {
    type Err = PaseError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "NONE" => Ok(PrecondMode::None),
            "A" => Ok(PrecondMode::A),
            "B" => Ok(PrecondMode::B),
            "B-A" | "BA" => Ok(PrecondMode::BA),
            other => Err(PaseError::InvalidArgument(format!(
                "unknown precondition mode '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    A,
    B,
}

/// `(u_H; γ)`: a coarse block and a small coefficient block of equal width.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedVector {
    pub u_h: MultiVector,
    pub gamma: DenseMatrix,
}

impl AugmentedVector {
    pub fn new(u_h: MultiVector, gamma: DenseMatrix) -> Result<Self> {
        if u_h.width() != gamma.ncols() {
            return Err(PaseError::dims(
                "AugmentedVector",
                u_h.width(),
                gamma.ncols(),
            ));
        }
        Ok(AugmentedVector { u_h, gamma })
    }

    pub fn zeros(n_h: usize, k: usize, width: usize) -> Self {
        AugmentedVector {
            u_h: MultiVector::zeros(n_h, width),
            gamma: DenseMatrix::zeros(k, width),
        }
    }

    pub fn width(&self) -> usize {
        self.u_h.width()
    }

    /// Stack into `(N_H + k) × m` coordinates.
    pub fn to_stacked(&self) -> MultiVector {
        let bottom = MultiVector::from_columns(
            self.gamma.nrows(),
            &(0..self.gamma.ncols())
                .map(|j| self.gamma.column(j))
                .collect::<Vec<_>>(),
        );
        self.u_h
            .vcat(&bottom)
            .expect("widths agree by construction")
    }

    pub fn from_stacked(x: &MultiVector, n_h: usize) -> Result<Self> {
        if x.dim() < n_h {
            return Err(PaseError::dims(
                "AugmentedVector::from_stacked",
                n_h,
                x.dim(),
            ));
        }
        let k = x.dim() - n_h;
        let u_h = x.row_range(0, n_h);
        let mut gamma = DenseMatrix::zeros(k, x.width());
        for j in 0..x.width() {
            for i in 0..k {
                gamma.set(i, j, x.get(n_h + i, j));
            }
        }
        Ok(AugmentedVector { u_h, gamma })
    }
}

fn symmetrized(m: &DenseMatrix) -> DenseMatrix {
    let mut s = m.clone();
    s.symmetrize();
    s
}

#[derive(Debug)]
enum CoarseSolver {
    Cholesky(SparseCholesky),
    Lu(DenseLu),
}

impl CoarseSolver {
    /// Cholesky when definite, dense LU otherwise (small corners only).
    fn factor(m: &SparseMatrix) -> Result<(Self, bool)> {
        match SparseCholesky::new(m) {
            Ok(c) => Ok((CoarseSolver::Cholesky(c), true)),
            Err(PaseError::Indefinite { .. }) if m.nrows() <= DENSE_LU_LIMIT => {
                Ok((CoarseSolver::Lu(DenseLu::new(&m.to_dense())?), false))
            }
            Err(PaseError::Indefinite { index, .. }) => Err(PaseError::Singular {
                context: "coarse corner (indefinite and too large for dense LU)",
                index,
            }),
            Err(e) => Err(e),
        }
    }

    fn solve(&self, b: &MultiVector) -> Result<MultiVector> {
        match self {
            CoarseSolver::Cholesky(c) => c.solve_multi(b),
            CoarseSolver::Lu(lu) => {
                let mut out = MultiVector::zeros(b.dim(), b.width());
                for j in 0..b.width() {
                    out.col_mut(j).copy_from_slice(&lu.solve(b.col(j)));
                }
                Ok(out)
            }
        }
    }
}

/// Block factorization of `A − μB` used by the definiteness probe and the
/// decoupled inner solves.
#[derive(Debug)]
struct ShiftFactor {
    spd: bool,
    coarse_spd: bool,
    coarse: Option<CoarseSolver>,
    m_hat: MultiVector,
    schur: DenseMatrix,
}

/// The augmented pencil `(A_Hh, B_Hh)`.
#[derive(Debug)]
pub struct AugmentedPencil {
    coarse_a: Arc<SparseMatrix>,
    coarse_b: Arc<SparseMatrix>,
    a_h: MultiVector,
    b_h: MultiVector,
    alpha: DenseMatrix,
    beta: DenseMatrix,
    a_zero: bool,
    b_zero: bool,
    mode: PrecondMode,
    shift: f64,
    coupling_a: AtomicUsize,
    coupling_b: AtomicUsize,
    cache: Mutex<Option<(u64, Arc<ShiftFactor>)>>,
}

impl Clone for AugmentedPencil {
    fn clone(&self) -> Self {
        AugmentedPencil {
            coarse_a: Arc::clone(&self.coarse_a),
            coarse_b: Arc::clone(&self.coarse_b),
            a_h: self.a_h.clone(),
            b_h: self.b_h.clone(),
            alpha: self.alpha.clone(),
            beta: self.beta.clone(),
            a_zero: self.a_zero,
            b_zero: self.b_zero,
            mode: self.mode,
            shift: self.shift,
            coupling_a: AtomicUsize::new(0),
            coupling_b: AtomicUsize::new(0),
            cache: Mutex::new(None),
        }
    }
}

/// Build the pencil from fine-space data: `a_h = R A_h Û`, `α = ÛᵀA_hÛ`,
/// `b_h = R B_h Û`, `β = ÛᵀB_hÛ`, with `R` the restriction.
pub fn assemble_augmented(
    coarse_a: Arc<SparseMatrix>,
    coarse_b: Arc<SparseMatrix>,
    fine_a: &SparseMatrix,
    fine_b: &SparseMatrix,
    restrict: &SparseMatrix,
    u_hat: &MultiVector,
) -> Result<AugmentedPencil> {
    if u_hat.width() == 0 {
        return Err(PaseError::InvalidArgument(
            "augmenting block must have width >= 1".into(),
        ));
    }
    if restrict.ncols() != fine_a.nrows() {
        return Err(PaseError::dims(
            "assemble_augmented (restriction)",
            fine_a.nrows(),
            restrict.ncols(),
        ));
    }
    let au = fine_a.spmv(u_hat)?;
    let bu = fine_b.spmv(u_hat)?;
    let a_h = restrict.spmv(&au)?;
    let b_h = restrict.spmv(&bu)?;
    let alpha = gram(u_hat, &au)?;
    let beta = gram(u_hat, &bu)?;
    AugmentedPencil::from_blocks(coarse_a, coarse_b, a_h, b_h, alpha, beta)
}

impl AugmentedPencil {
    /// Pencil from explicit blocks; `alpha` and `beta` are symmetrized.
    pub fn from_blocks(
        coarse_a: Arc<SparseMatrix>,
        coarse_b: Arc<SparseMatrix>,
        a_h: MultiVector,
        b_h: MultiVector,
        alpha: DenseMatrix,
        beta: DenseMatrix,
    ) -> Result<Self> {
        let n = coarse_a.nrows();
        let k = a_h.width();
        if coarse_a.ncols() != n || coarse_b.nrows() != n || coarse_b.ncols() != n {
            return Err(PaseError::dims(
                "AugmentedPencil (coarse corner)",
                n,
                coarse_b.nrows(),
            ));
        }
        if a_h.dim() != n || b_h.dim() != n || b_h.width() != k {
            return Err(PaseError::dims(
                "AugmentedPencil (coupling blocks)",
                n,
                b_h.dim(),
            ));
        }
        for m in [&alpha, &beta] {
            if m.nrows() != k || m.ncols() != k {
                return Err(PaseError::dims(
                    "AugmentedPencil (small blocks)",
                    k,
                    m.nrows(),
                ));
            }
        }
        Ok(AugmentedPencil {
            a_zero: a_h.max_abs() == 0.0,
            b_zero: b_h.max_abs() == 0.0,
            coarse_a,
            coarse_b,
            a_h,
            b_h,
            alpha: symmetrized(&alpha),
            beta: symmetrized(&beta),
            mode: PrecondMode::None,
            shift: 0.0,
            coupling_a: AtomicUsize::new(0),
            coupling_b: AtomicUsize::new(0),
            cache: Mutex::new(None),
        })
    }

    pub fn coarse_dim(&self) -> usize {
        self.coarse_a.nrows()
    }

    pub fn k(&self) -> usize {
        self.a_h.width()
    }

    pub fn mode(&self) -> PrecondMode {
        self.mode
    }

    pub fn coarse_a(&self) -> &SparseMatrix {
        &self.coarse_a
    }

    pub fn coarse_b(&self) -> &SparseMatrix {
        &self.coarse_b
    }

    pub fn a_h(&self) -> &MultiVector {
        &self.a_h
    }

    pub fn b_h(&self) -> &MultiVector {
        &self.b_h
    }

    pub fn alpha(&self) -> &DenseMatrix {
        &self.alpha
    }

    pub fn beta(&self) -> &DenseMatrix {
        &self.beta
    }

    /// Number of coupling inner products `cᵀu_H` evaluated so far, per side.
    pub fn coupling_products(&self, side: Side) -> usize {
        match side {
            Side::A => self.coupling_a.load(Ordering::Relaxed),
            Side::B => self.coupling_b.load(Ordering::Relaxed),
        }
    }

    fn side(
        &self,
        side: Side,
    ) -> (
        &SparseMatrix,
        &MultiVector,
        &DenseMatrix,
        bool,
        &AtomicUsize,
    ) {
        match side {
            Side::A => (
                &self.coarse_a,
                &self.a_h,
                &self.alpha,
                self.a_zero,
                &self.coupling_a,
            ),
            Side::B => (
                &self.coarse_b,
                &self.b_h,
                &self.beta,
                self.b_zero,
                &self.coupling_b,
            ),
        }
    }

    /// `(H u + c γ; cᵀu + blk γ)` for the chosen side.
    pub fn aug_matvec(&self, side: Side, x: &AugmentedVector) -> Result<AugmentedVector> {
        if x.u_h.dim() != self.coarse_dim() || x.gamma.nrows() != self.k() {
            return Err(PaseError::dims(
                "aug_matvec",
                self.coarse_dim() + self.k(),
                x.u_h.dim() + x.gamma.nrows(),
            ));
        }
        let (h, c, blk, zero, counter) = self.side(side);
        let mut top = h.spmv(&x.u_h)?;
        let mut bottom = blk.matmul(&x.gamma)?;
        if !zero {
            top.axpy(1.0, &c.mul_dense(&x.gamma)?)?;
            counter.fetch_add(x.width(), Ordering::Relaxed);
            bottom = bottom.add_scaled(1.0, &gram(c, &x.u_h)?)?;
        }
        AugmentedVector::new(top, bottom)
    }

    fn apply_stacked(&self, side: Side, x: &MultiVector) -> Result<MultiVector> {
        let xv = AugmentedVector::from_stacked(x, self.coarse_dim())?;
        Ok(self.aug_matvec(side, &xv)?.to_stacked())
    }

    /// Explicit `(N_H + k)²` matrix of one side.
    pub fn dense_assembly(&self, side: Side) -> DenseMatrix {
        let (h, c, blk, _, _) = self.side(side);
        let (n, k) = (self.coarse_dim(), self.k());
        let mut d = DenseMatrix::zeros(n + k, n + k);
        for (i, j, v) in h.triplets() {
            d.set(i, j, v);
        }
        for j in 0..k {
            for i in 0..n {
                d.set(i, n + j, c.get(i, j));
                d.set(n + j, i, c.get(i, j));
            }
            for i in 0..k {
                d.set(n + i, n + j, blk.get(i, j));
            }
        }
        d
    }

    /// `A ← A − θB` on every block of the A side.
    pub fn apply_shift(&self, theta: f64) -> Result<AugmentedPencil> {
        if self.mode != PrecondMode::None {
            return Err(PaseError::InvalidArgument(
                "shifts must be applied before any precondition transform".into(),
            ));
        }
        if theta == 0.0 {
            return Ok(self.clone());
        }
        let mut a_h = self.a_h.clone();
        a_h.axpy(-theta, &self.b_h)?;
        let mut out = AugmentedPencil::from_blocks(
            Arc::new(self.coarse_a.add_scaled(-theta, &self.coarse_b)?),
            Arc::clone(&self.coarse_b),
            a_h,
            self.b_h.clone(),
            self.alpha.add_scaled(-theta, &self.beta)?,
            self.beta.clone(),
        )?;
        out.shift = self.shift + theta;
        Ok(out)
    }

    /// Decouple one side by the block congruence `Tᵀ(·)T`, `T = [I, −ŝ; 0, I]`.
    pub fn precond_transform(&self, mode: PrecondMode) -> Result<(AugmentedPencil, TransformData)> {
        if self.mode != PrecondMode::None {
            return Err(PaseError::InvalidArgument(
                "pencil is already transformed".into(),
            ));
        }
        if mode == PrecondMode::None {
            return Ok((self.clone(), TransformData::identity()));
        }
        let corner_is_a = mode == PrecondMode::A;
        let (s_h, s, sigma) = if corner_is_a {
            (&self.coarse_a, &self.a_h, &self.alpha)
        } else {
            (&self.coarse_b, &self.b_h, &self.beta)
        };
        let (o_h, o, omega) = if corner_is_a {
            (&self.coarse_b, &self.b_h, &self.beta)
        } else {
            (&self.coarse_a, &self.a_h, &self.alpha)
        };
        let (solver, _) = CoarseSolver::factor(s_h)?;
        let s_hat = solver.solve(s)?;

        let sigma_new = symmetrized(&sigma.add_scaled(-1.0, &gram(s, &s_hat)?)?);
        let mut o_new = o.clone();
        o_new.axpy(-1.0, &o_h.spmv(&s_hat)?)?;
        let os = gram(o, &s_hat)?;
        let omega_new = omega
            .add_scaled(-1.0, &os)?
            .add_scaled(-1.0, &os.transpose())?
            .add_scaled(1.0, &gram(&s_hat, &o_h.spmv(&s_hat)?)?)?;
        let omega_new = symmetrized(&omega_new);
        let zero = MultiVector::zeros(self.coarse_dim(), self.k());

        let (a_h, alpha, b_h, beta) = if corner_is_a {
            (zero, sigma_new, o_new, omega_new)
        } else {
            (o_new, omega_new, zero, sigma_new)
        };
        let mut out = AugmentedPencil::from_blocks(
            Arc::clone(&self.coarse_a),
            Arc::clone(&self.coarse_b),
            a_h,
            b_h,
            alpha,
            beta,
        )?;
        out.shift = self.shift;
        out.mode = mode;
        let td = TransformData {
            mode,
            a_hat: corner_is_a.then(|| s_hat.clone()),
            b_hat: (!corner_is_a).then_some(s_hat),
        };
        Ok((out, td))
    }

    fn shift_factor(&self, mu: f64) -> Result<Arc<ShiftFactor>> {
        let key = mu.to_bits();
        if let Some((k, f)) = self.cache.lock().expect("cache lock").as_ref() {
            if *k == key {
                return Ok(Arc::clone(f));
            }
        }
        let m_h = if mu == 0.0 {
            (*self.coarse_a).clone()
        } else {
            self.coarse_a.add_scaled(-mu, &self.coarse_b)?
        };
        let mut m = self.a_h.clone();
        if mu != 0.0 {
            m.axpy(-mu, &self.b_h)?;
        }
        let corner = self.alpha.add_scaled(-mu, &self.beta)?;
        let (coarse, coarse_spd) = match CoarseSolver::factor(&m_h) {
            Ok((c, spd)) => (Some(c), spd),
            Err(PaseError::Singular { .. }) => (None, false),
            Err(e) => return Err(e),
        };
        let (m_hat, schur) = match &coarse {
            Some(c) => {
                let m_hat = c.solve(&m)?;
                let schur = symmetrized(&corner.add_scaled(-1.0, &gram(&m, &m_hat)?)?);
                (m_hat, schur)
            }
            None => (
                MultiVector::zeros(self.coarse_dim(), self.k()),
                corner.clone(),
            ),
        };
        let scale = (0..self.k()).fold(0.0f64, |s, i| s.max(corner.get(i, i).abs()));
        let spd = coarse_spd && cholesky_psd(&schur, 1e-10 * scale).is_ok();
        let f = Arc::new(ShiftFactor {
            spd,
            coarse_spd,
            coarse,
            m_hat,
            schur,
        });
        *self.cache.lock().expect("cache lock") = Some((key, Arc::clone(&f)));
        Ok(f)
    }

    /// Inner solve through the block decomposition: CG on the coarse corner and
    /// a dense solve on the Schur complement.
    fn block_decoupled_solve(
        &self,
        mu: f64,
        rhs: &MultiVector,
        x0: &MultiVector,
        cfg: &BcgConfig,
    ) -> Result<ShiftSolve> {
        let f = self.shift_factor(mu)?;
        if f.coarse.is_none() {
            return Err(PaseError::ShiftProximity {
                theta: self.shift + mu,
            });
        }
        let n = self.coarse_dim();
        let r = AugmentedVector::from_stacked(rhs, n)?;
        let x = AugmentedVector::from_stacked(x0, n)?;
        let r_gamma = r.gamma.add_scaled(-1.0, &gram(&f.m_hat, &r.u_h)?)?;
        let mut u0 = x.u_h.clone();
        u0.axpy(1.0, &f.m_hat.mul_dense(&x.gamma)?)?;

        let (mut u, normal, iters) = if f.coarse_spd {
            let op = Shifted {
                a: self.coarse_a.as_ref() as &dyn LinearOperator,
                b: self.coarse_b.as_ref() as &dyn LinearOperator,
                shift: mu,
            };
            match block_cg_op(&op, &r.u_h, &u0, cfg) {
                Ok(o) => (o.x, false, o.iters),
                Err(PaseError::Indefinite { .. }) => {
                    let o = cgnr(&op, &r.u_h, &u0, cfg)?;
                    (o.x, true, o.iters)
                }
                Err(e) => return Err(e),
            }
        } else {
            (
                f.coarse.as_ref().expect("checked above").solve(&r.u_h)?,
                false,
                0,
            )
        };
        let gamma = self.schur_solve(mu, &f, &r_gamma)?;
        u.axpy(-1.0, &f.m_hat.mul_dense(&gamma)?)?;
        Ok(ShiftSolve {
            x: AugmentedVector::new(u, gamma)?.to_stacked(),
            normal_equations: normal,
            iters,
        })
    }

    fn schur_solve(&self, mu: f64, f: &ShiftFactor, r_gamma: &DenseMatrix) -> Result<DenseMatrix> {
        let lu = DenseLu::new(&f.schur).map_err(|_| PaseError::ShiftProximity {
            theta: self.shift + mu,
        })?;
        let mut gamma = DenseMatrix::zeros(self.k(), r_gamma.ncols());
        for j in 0..r_gamma.ncols() {
            for (i, v) in lu.solve(&r_gamma.column(j)).into_iter().enumerate() {
                gamma.set(i, j, v);
            }
        }
        Ok(gamma)
    }

    /// Exact solve by block elimination with the factored corner, used when the
    /// shifted pencil is indefinite.
    fn factored_solve(&self, mu: f64, f: &ShiftFactor, rhs: &MultiVector) -> Result<MultiVector> {
        let coarse = f.coarse.as_ref().ok_or(PaseError::ShiftProximity {
            theta: self.shift + mu,
        })?;
        let r = AugmentedVector::from_stacked(rhs, self.coarse_dim())?;
        let r_gamma = r.gamma.add_scaled(-1.0, &gram(&f.m_hat, &r.u_h)?)?;
        let gamma = self.schur_solve(mu, f, &r_gamma)?;
        let mut u = coarse.solve(&r.u_h)?;
        u.axpy(-1.0, &f.m_hat.mul_dense(&gamma)?)?;
        Ok(AugmentedVector::new(u, gamma)?.to_stacked())
    }
}

impl Pencil for AugmentedPencil {
    fn dim(&self) -> usize {
        self.coarse_dim() + self.k()
    }

    fn apply_a(&self, x: &MultiVector) -> Result<MultiVector> {
        self.apply_stacked(Side::A, x)
    }

    fn apply_b(&self, x: &MultiVector) -> Result<MultiVector> {
        self.apply_stacked(Side::B, x)
    }

    fn shift(&self) -> f64 {
        self.shift
    }

    fn is_shift_spd(&self, mu: f64) -> Result<bool> {
        Ok(self.shift_factor(mu)?.spd)
    }

    fn solve_shifted(
        &self,
        mu: f64,
        rhs: &MultiVector,
        x0: &MultiVector,
        cfg: &BcgConfig,
    ) -> Result<ShiftSolve> {
        if self.mode == PrecondMode::BA {
            return self.block_decoupled_solve(mu, rhs, x0, cfg);
        }
        let f = self.shift_factor(mu)?;
        if !f.spd && f.coarse.is_some() {
            return Ok(ShiftSolve {
                x: self.factored_solve(mu, &f, rhs)?,
                normal_equations: false,
                iters: 0,
            });
        }
        default_shifted_solve(self, f.spd, mu, rhs, x0, cfg)
    }

    fn with_shift(&self, delta: f64) -> Result<Self> {
        self.apply_shift(delta)
    }
}

/// What is needed to map vectors between original and transformed coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformData {
    pub mode: PrecondMode,
    pub a_hat: Option<MultiVector>,
    pub b_hat: Option<MultiVector>,
}

impl TransformData {
    pub fn identity() -> Self {
        TransformData {
            mode: PrecondMode::None,
            a_hat: None,
            b_hat: None,
        }
    }

    fn hat(&self) -> Option<&MultiVector> {
        self.a_hat.as_ref().or(self.b_hat.as_ref())
    }

    /// Transformed → original: `u_H = ũ_H − ŝ γ̃`, `γ = γ̃`.
    pub fn back_transform(&self, x: &AugmentedVector) -> Result<AugmentedVector> {
        self.map(x, -1.0)
    }

    /// Original → transformed: `ũ_H = u_H + ŝ γ`.
    pub fn forward_transform(&self, x: &AugmentedVector) -> Result<AugmentedVector> {
        self.map(x, 1.0)
    }

    fn map(&self, x: &AugmentedVector, sign: f64) -> Result<AugmentedVector> {
        let Some(hat) = self.hat() else {
            return Ok(x.clone());
        };
        if hat.dim() != x.u_h.dim() || hat.width() != x.gamma.nrows() {
            return Err(PaseError::dims("transform", hat.dim(), x.u_h.dim()));
        }
        let mut u = x.u_h.clone();
        u.axpy(sign, &hat.mul_dense(&x.gamma)?)?;
        AugmentedVector::new(u, x.gamma.clone())
    }

    pub fn back_transform_stacked(&self, x: &MultiVector) -> Result<MultiVector> {
        let n = self.hat().map(|h| h.dim()).unwrap_or(x.dim());
        if self.hat().is_none() {
            return Ok(x.clone());
        }
        Ok(self
            .back_transform(&AugmentedVector::from_stacked(x, n)?)?
            .to_stacked())
    }

    pub fn forward_transform_stacked(&self, x: &MultiVector) -> Result<MultiVector> {
        let n = self.hat().map(|h| h.dim()).unwrap_or(x.dim());
        if self.hat().is_none() {
            return Ok(x.clone());
        }
        Ok(self
            .forward_transform(&AugmentedVector::from_stacked(x, n)?)?
            .to_stacked())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::eig::{dense_sym_geig, Selector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng, diag: f64) -> DenseMatrix {
        let g = DenseMatrix::from_row_major(
            n,
            n,
            (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        g.transpose()
            .matmul(&g)
            .unwrap()
            .add_scaled(diag, &DenseMatrix::identity(n))
            .unwrap()
    }

    /// Split a dense SPD pencil into augmented blocks with corner size `n`.
    pub(crate) fn random_pencil(n: usize, k: usize, seed: u64) -> AugmentedPencil {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_spd(n + k, &mut rng, 1.0);
        let b = random_spd(n + k, &mut rng, 2.0);
        split(&a, &b, n)
    }

    fn split(a: &DenseMatrix, b: &DenseMatrix, n: usize) -> AugmentedPencil {
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

    fn spectrum(p: &AugmentedPencil) -> Vec<f64> {
        dense_sym_geig(
            &p.dense_assembly(Side::A),
            &p.dense_assembly(Side::B),
            Selector::All,
        )
        .unwrap()
        .0
    }

    #[test]
    fn matvec_block_restrictions() {
        let p = random_pencil(5, 2, 1);
        let x = AugmentedVector::new(MultiVector::zeros(5, 2), DenseMatrix::identity(2)).unwrap();
        let y = p.aug_matvec(Side::A, &x).unwrap();
        assert_eq!(y.u_h, *p.a_h());
        assert_eq!(y.gamma, *p.alpha());
    }

    #[test]
    fn matvec_matches_dense_assembly() {
        let p = random_pencil(6, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = MultiVector::random(9, 2, &mut rng);
        for side in [Side::A, Side::B] {
            let y = p.apply_stacked(side, &x).unwrap();
            let d = p.dense_assembly(side);
            for j in 0..2 {
                let yd = d.matvec(x.col(j));
                for i in 0..9 {
                    assert!((y.get(i, j) - yd[i]).abs() <= 1e-13 * (1.0 + yd[i].abs()));
                }
            }
            assert_eq!(d.asymmetry(), 0.0);
        }
    }

    #[test]
    fn toy_two_by_two() {
        let fine_a =
            SparseMatrix::from_dense(&DenseMatrix::from_rows(&[vec![2.0, -1.0], vec![-1.0, 2.0]]));
        let fine_b = SparseMatrix::identity(2);
        let prolong = SparseMatrix::from_triplets(2, 1, &[(0, 0, 1.0)]).unwrap();
        let restrict = prolong.transpose();
        let u = MultiVector::from_columns(2, &[vec![0.0, 1.0]]);
        let p = assemble_augmented(
            Arc::new(fine_a.galerkin(&prolong).unwrap()),
            Arc::new(fine_b.galerkin(&prolong).unwrap()),
            &fine_a,
            &fine_b,
            &restrict,
            &u,
        )
        .unwrap();
        let a = p.dense_assembly(Side::A);
        assert_eq!(
            a,
            DenseMatrix::from_rows(&[vec![2.0, -1.0], vec![-1.0, 2.0]])
        );
        assert_eq!(p.dense_assembly(Side::B), DenseMatrix::identity(2));
    }

    #[test]
    fn transforms_preserve_spectrum_and_zero_the_coupling() {
        let p = random_pencil(6, 2, 3);
        let base = spectrum(&p);
        for mode in [PrecondMode::A, PrecondMode::B, PrecondMode::BA] {
            let (t, td) = p.precond_transform(mode).unwrap();
            let s = spectrum(&t);
            for (x, y) in base.iter().zip(&s) {
                assert!(
                    (x - y).abs() <= 1e-10 * x.abs().max(1.0),
                    "{mode}: {x} vs {y}"
                );
            }
            match mode {
                PrecondMode::A => assert_eq!(t.a_h().max_abs(), 0.0),
                _ => assert_eq!(t.b_h().max_abs(), 0.0),
            }
            assert_eq!(td.mode, mode);
        }
    }

    #[test]
    fn mode_a_does_no_a_side_coupling_products() {
        let p = random_pencil(6, 2, 4);
        let (t, _) = p.precond_transform(PrecondMode::A).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = MultiVector::random(8, 3, &mut rng);
        t.apply_a(&x).unwrap();
        assert_eq!(t.coupling_products(Side::A), 0);
        t.apply_b(&x).unwrap();
        assert_eq!(t.coupling_products(Side::B), 3);
    }

    #[test]
    fn decoupled_pencil_transforms_to_itself() {
        let mut p = random_pencil(4, 2, 5);
        p.a_h = MultiVector::zeros(4, 2);
        p.a_zero = true;
        let (t, td) = p.precond_transform(PrecondMode::A).unwrap();
        assert_eq!(t.alpha(), p.alpha());
        assert_eq!(t.beta(), p.beta());
        assert_eq!(t.b_h(), p.b_h());
        let x = AugmentedVector::new(
            MultiVector::from_columns(4, &[vec![1.0, 2.0, 3.0, 4.0]]),
            DenseMatrix::from_rows(&[vec![1.0], vec![-1.0]]),
        )
        .unwrap();
        assert_eq!(td.back_transform(&x).unwrap(), x);
    }

    #[test]
    fn round_trip_and_residual_after_back_transform() {
        let p = random_pencil(7, 3, 6);
        let (t, td) = p.precond_transform(PrecondMode::A).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = MultiVector::random(10, 2, &mut rng);
        let back = td
            .back_transform_stacked(&td.forward_transform_stacked(&x).unwrap())
            .unwrap();
        for (a, b) in x.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() <= 1e-13);
        }
        let (vals, vecs) = dense_sym_geig(
            &t.dense_assembly(Side::A),
            &t.dense_assembly(Side::B),
            Selector::Smallest(2),
        )
        .unwrap();
        let cols: Vec<Vec<f64>> = (0..2).map(|j| vecs.column(j)).collect();
        let y = td
            .back_transform_stacked(&MultiVector::from_columns(10, &cols))
            .unwrap();
        let (ay, by) = (p.apply_a(&y).unwrap(), p.apply_b(&y).unwrap());
        for j in 0..2 {
            let r: f64 = ay
                .col(j)
                .iter()
                .zip(by.col(j))
                .map(|(a, b)| (a - vals[j] * b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(r <= 1e-9 * vals[j].abs());
        }
    }

    #[test]
    fn shift_moves_spectrum_and_composes() {
        let p = random_pencil(5, 1, 7);
        let base = spectrum(&p);
        let s = p.apply_shift(0.7).unwrap();
        for (x, y) in base.iter().zip(spectrum(&s)) {
            assert!((x - 0.7 - y).abs() < 1e-10);
        }
        let twice = p.apply_shift(0.3).unwrap().apply_shift(0.4).unwrap();
        let once = p.apply_shift(0.7).unwrap();
        assert!(
            twice
                .dense_assembly(Side::A)
                .add_scaled(-1.0, &once.dense_assembly(Side::A))
                .unwrap()
                .max_abs()
                < 1e-14
        );
        assert_eq!(
            p.apply_shift(0.0).unwrap().dense_assembly(Side::A),
            p.dense_assembly(Side::A)
        );
        assert!(s.precond_transform(PrecondMode::B).is_ok());
        let (t, _) = p.precond_transform(PrecondMode::A).unwrap();
        assert!(t.apply_shift(1.0).is_err());
    }

    #[test]
    fn probe_matches_dense_definiteness() {
        let p = random_pencil(6, 2, 8);
        let l1 = spectrum(&p)[0];
        assert!(p.is_shift_spd(0.9 * l1).unwrap());
        assert!(!p.is_shift_spd(1.1 * l1).unwrap());
    }

    #[test]
    fn decoupled_inner_solve_is_exact_with_enough_iterations() {
        let p = random_pencil(8, 2, 10);
        let (t, _) = p.precond_transform(PrecondMode::BA).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rhs = MultiVector::random(10, 2, &mut rng);
        let cfg = BcgConfig {
            max_iters: 100,
            rel_tol: 1e-14,
            shift: 0.0,
        };
        let mu = 0.5 * spectrum(&t)[0];
        let out = t
            .solve_shifted(mu, &rhs, &MultiVector::zeros(10, 2), &cfg)
            .unwrap();
        let mut r = t.apply_a(&out.x).unwrap();
        r.axpy(-mu, &t.apply_b(&out.x).unwrap()).unwrap();
        r.axpy(-1.0, &rhs).unwrap();
        assert!(r.max_abs() < 1e-10);
        assert!(!out.normal_equations);
    }
}
