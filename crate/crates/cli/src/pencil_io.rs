//! Hierarchies read from and written to Matrix Market files.

use std::path::Path;

use pase_core::driver::Hierarchy;
use pase_core::linalg::{read_matrix_market_file, write_matrix_market_file, MmSymmetry};
use pase_core::{PaseError, Result, SparseMatrix};

/// Relative asymmetry above which a pencil matrix is rejected.
const ASYMMETRY_TOL: f64 = 1e-12;

fn read_symmetric(path: &Path, what: &str) -> Result<SparseMatrix> {
    let m = read_matrix_market_file(path).map_err(|e| match e {
        PaseError::MatrixMarket { line, message } => PaseError::MatrixMarket {
            line,
            message: format!("{}: {message}", path.display()),
        },
        PaseError::Io(io) => PaseError::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", path.display()),
        )),
        other => other,
    })?;
    if m.nrows() != m.ncols() {
        return Err(PaseError::InvalidArgument(format!(
            "{what} ({}) is {}x{}, expected square",
            path.display(),
            m.nrows(),
            m.ncols()
        )));
    }
    let asym = m.asymmetry();
    if asym > ASYMMETRY_TOL * m.max_abs().max(f64::MIN_POSITIVE) {
        return Err(PaseError::InvalidArgument(format!(
            "{what} ({}) is not symmetric: max |a_ij - a_ji| = {asym:e}",
            path.display()
        )));
    }
    Ok(m)
}

/// Read `A_h`, `B_h` and the prolongation `I`; the coarse pencil is `IᵀA_hI`,
/// `IᵀB_hI` unless coarse files are given.
pub fn load_pencil(
    matrix_a: &Path,
    matrix_b: &Path,
    prolongation: &Path,
    coarse: Option<(&Path, &Path)>,
) -> Result<Hierarchy> {
    let a = read_symmetric(matrix_a, "A")?;
    let b = read_symmetric(matrix_b, "B")?;
    let p = read_matrix_market_file(prolongation)?;
    match coarse {
        None => Hierarchy::galerkin(a, b, p),
        Some((ca, cb)) => Hierarchy::new(
            read_symmetric(ca, "coarse A")?,
            read_symmetric(cb, "coarse B")?,
            a,
            b,
            p,
        ),
    }
}

/// Write `A.mtx`, `B.mtx` (symmetric) and `P.mtx` (general) into `dir`.
pub fn export_pencil(dir: &Path, hier: &Hierarchy) -> Result<()> {
    write_matrix_market_file(dir.join("A.mtx"), &hier.fine_a, MmSymmetry::Symmetric)?;
    write_matrix_market_file(dir.join("B.mtx"), &hier.fine_b, MmSymmetry::Symmetric)?;
    write_matrix_market_file(dir.join("P.mtx"), &hier.prolong, MmSymmetry::General)?;
    Ok(())
}
