//! Column-independent block conjugate gradients with shared operator applications.

use serde::{Deserialize, Serialize};

use crate::error::{PaseError, Result};
use crate::linalg::multivec::{axpy, dot, norm2};
use crate::linalg::ops::{LinearOperator, Shifted, Squared};
use crate::linalg::{MultiVector, SparseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BcgConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub shift: f64,
}

impl Default for BcgConfig {
    fn default() -> Self {
        BcgConfig {
            max_iters: 40,
            rel_tol: 1e-12,
            shift: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: MultiVector,
    /// largest number of iterations taken by any column
    pub iters: usize,
    /// `‖b − A x‖ / ‖b‖` per column (initial residual norm replaces `‖b‖` when `b = 0`)
    pub residuals: Vec<f64>,
    pub converged: Vec<bool>,
}

/// Solve `(A − shift·B) X = RHS` from `X0`.
pub fn block_cg(
    a: &SparseMatrix,
    shift_b: Option<&SparseMatrix>,
    rhs: &MultiVector,
    x0: &MultiVector,
    cfg: &BcgConfig,
) -> Result<CgOutcome> {
    match shift_b {
        Some(b) if cfg.shift != 0.0 => {
            let op = Shifted {
                a,
                b,
                shift: cfg.shift,
            };
            block_cg_op(&op, rhs, x0, cfg)
        }
        _ => block_cg_op(a, rhs, x0, cfg),
    }
}

/// Block CG for any symmetric positive definite operator; `cfg.shift` is ignored.
pub fn block_cg_op(
    op: &dyn LinearOperator,
    rhs: &MultiVector,
    x0: &MultiVector,
    cfg: &BcgConfig,
) -> Result<CgOutcome> {
    let n = op.dim();
    if rhs.dim() != n || x0.dim() != n {
        return Err(PaseError::dims(
            "block_cg",
            n,
            if rhs.dim() != n { rhs.dim() } else { x0.dim() },
        ));
    }
    if rhs.width() != x0.width() {
        return Err(PaseError::dims(
            "block_cg (widths)",
            rhs.width(),
            x0.width(),
        ));
    }
    if cfg.max_iters == 0 || !(cfg.rel_tol > 0.0) {
        return Err(PaseError::InvalidArgument(
            "block_cg needs max_iters >= 1 and rel_tol > 0".into(),
        ));
    }
    let m = rhs.width();
    let mut x = x0.clone();
    let mut r = rhs.clone();
    r.axpy(-1.0, &op.apply(&x)?)?;

    let mut reference = vec![0.0; m];
    let mut rr = vec![0.0; m];
    let mut active = Vec::new();
    let mut converged = vec![false; m];
    for j in 0..m {
        rr[j] = dot(r.col(j), r.col(j));
        let bn = norm2(rhs.col(j));
        reference[j] = if bn > 0.0 { bn } else { rr[j].sqrt() };
        if rr[j].sqrt() <= cfg.rel_tol * reference[j] {
            converged[j] = true;
        } else {
            active.push(j);
        }
    }
    let mut p = r.clone();
    let mut iters = 0;

    while !active.is_empty() && iters < cfg.max_iters {
        iters += 1;
        let q = op.apply(&p.select_columns(&active))?;
        let mut still = Vec::with_capacity(active.len());
        for (k, &j) in active.iter().enumerate() {
            let qk = q.col(k);
            let pq = dot(p.col(j), qk);
            if !(pq > 0.0) {
                return Err(PaseError::Indefinite {
                    context: "block_cg",
                    index: j,
                    value: pq,
                });
            }
            let alpha = rr[j] / pq;
            axpy(alpha, p.col(j), x.col_mut(j));
            axpy(-alpha, qk, r.col_mut(j));
            let rr_new = dot(r.col(j), r.col(j));
            if rr_new.sqrt() <= cfg.rel_tol * reference[j] {
                converged[j] = true;
                rr[j] = rr_new;
                continue;
            }
            let beta = rr_new / rr[j];
            rr[j] = rr_new;
            let (rc, pc) = (r.col(j).to_vec(), p.col_mut(j));
            for (pi, ri) in pc.iter_mut().zip(rc) {
                *pi = ri + beta * *pi;
            }
            still.push(j);
        }
        active = still;
    }
    let residuals = (0..m)
        .map(|j| {
            if reference[j] > 0.0 {
                rr[j].sqrt() / reference[j]
            } else {
                0.0
            }
        })
        .collect();
    Ok(CgOutcome {
        x,
        iters,
        residuals,
        converged,
    })
}

/// CG on the normal equations `K² X = K·RHS` for a symmetric, possibly indefinite `K`.
pub fn cgnr(
    op: &dyn LinearOperator,
    rhs: &MultiVector,
    x0: &MultiVector,
    cfg: &BcgConfig,
) -> Result<CgOutcome> {
    let kb = op.apply(rhs)?;
    block_cg_op(&Squared(op), &kb, x0, cfg)
}
