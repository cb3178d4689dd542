//! The operator interface the block eigensolvers run against.

use std::sync::Arc;

use crate::error::{PaseError, Result};
use crate::linalg::ops::{LinearOperator, Shifted};
use crate::linalg::{MultiVector, SparseCholesky, SparseMatrix};
use crate::solvers::{block_cg_op, cgnr, BcgConfig, CgOutcome};

/// Result of an approximate shifted solve.
#[derive(Debug, Clone)]
pub struct ShiftSolve {
    pub x: MultiVector,
    /// the shifted operator was not positive definite and CG ran on the normal equations
    pub normal_equations: bool,
    pub iters: usize,
}

impl ShiftSolve {
    pub(crate) fn from_cg(out: CgOutcome, normal_equations: bool) -> Self {
        ShiftSolve {
            x: out.x,
            normal_equations,
            iters: out.iters,
        }
    }
}

/// A symmetric pencil `(A, B)` with `B` positive (semi)definite, accessed only
/// through block applications and shifted solves.
pub trait Pencil: Sync {
    fn dim(&self) -> usize;
    fn apply_a(&self, x: &MultiVector) -> Result<MultiVector>;
    fn apply_b(&self, x: &MultiVector) -> Result<MultiVector>;

    /// Shift already folded into the A side: eigenvalues of the stored pencil are
    /// the original ones minus this value.
    fn shift(&self) -> f64 {
        0.0
    }

    /// Whether `A − μB` is positive definite (a factorization probe).
    fn is_shift_spd(&self, mu: f64) -> Result<bool>;

    /// Approximate `(A − μB)⁻¹ rhs` starting from `x0`.
    fn solve_shifted(
        &self,
        mu: f64,
        rhs: &MultiVector,
        x0: &MultiVector,
        cfg: &BcgConfig,
    ) -> Result<ShiftSolve>;

    /// The same pencil with `A` replaced by `A − delta·B`.
    fn with_shift(&self, delta: f64) -> Result<Self>
    where
        Self: Sized;
}

/// The A side of a pencil as a linear operator.
pub struct ASide<'a, P: ?Sized>(pub &'a P);
/// The B side of a pencil as a linear operator.
pub struct BSide<'a, P: ?Sized>(pub &'a P);

impl<P: Pencil + ?Sized> LinearOperator for ASide<'_, P> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn apply(&self, x: &MultiVector) -> Result<MultiVector> {
        self.0.apply_a(x)
    }
}

impl<P: Pencil + ?Sized> LinearOperator for BSide<'_, P> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn apply(&self, x: &MultiVector) -> Result<MultiVector> {
        self.0.apply_b(x)
    }
}

/// CG on `A − μB` when the probe says it is definite (falling back to the normal
/// equations if CG still meets a nonpositive curvature), CGNR otherwise.
pub(crate) fn default_shifted_solve<P: Pencil + ?Sized>(
    p: &P,
    spd: bool,
    mu: f64,
    rhs: &MultiVector,
    x0: &MultiVector,
    cfg: &BcgConfig,
) -> Result<ShiftSolve> {
    let (a, b) = (ASide(p), BSide(p));
    let op = Shifted {
        a: &a,
        b: &b,
        shift: mu,
    };
    if spd {
        match block_cg_op(&op, rhs, x0, cfg) {
            Ok(out) => return Ok(ShiftSolve::from_cg(out, false)),
            Err(PaseError::Indefinite { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(ShiftSolve::from_cg(cgnr(&op, rhs, x0, cfg)?, true))
}

/// A pencil of two sparse matrices.
#[derive(Debug, Clone)]
pub struct SparsePencil {
    pub a: Arc<SparseMatrix>,
    pub b: Arc<SparseMatrix>,
    shift: f64,
}

impl SparsePencil {
    pub fn new(a: SparseMatrix, b: SparseMatrix) -> Result<Self> {
        Self::from_arcs(Arc::new(a), Arc::new(b))
    }

    pub fn from_arcs(a: Arc<SparseMatrix>, b: Arc<SparseMatrix>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || b.ncols() != n {
            return Err(PaseError::dims("SparsePencil", n, b.nrows()));
        }
        Ok(SparsePencil { a, b, shift: 0.0 })
    }
}

impl Pencil for SparsePencil {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn apply_a(&self, x: &MultiVector) -> Result<MultiVector> {
        self.a.spmv(x)
    }

    fn apply_b(&self, x: &MultiVector) -> Result<MultiVector> {
        self.b.spmv(x)
    }

    fn shift(&self) -> f64 {
        self.shift
    }

    fn is_shift_spd(&self, mu: f64) -> Result<bool> {
        let m = self.a.add_scaled(-mu, &self.b)?;
        match SparseCholesky::new(&m) {
            Ok(_) => Ok(true),
            Err(PaseError::Indefinite { .. }) => Ok(false),
            Err(e) => Err(e),
        }
    }

    fn solve_shifted(
        &self,
        mu: f64,
        rhs: &MultiVector,
        x0: &MultiVector,
        cfg: &BcgConfig,
    ) -> Result<ShiftSolve> {
        let spd = self.is_shift_spd(mu)?;
        default_shifted_solve(self, spd, mu, rhs, x0, cfg)
    }

    fn with_shift(&self, delta: f64) -> Result<Self> {
        Ok(SparsePencil {
            a: Arc::new(self.a.add_scaled(-delta, &self.b)?),
            b: Arc::clone(&self.b),
            shift: self.shift + delta,
        })
    }
}
