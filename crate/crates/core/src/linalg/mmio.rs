//! Matrix Market coordinate format (real/integer, general/symmetric).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::dense::DenseMatrix;
use super::sparse::SparseMatrix;
use crate::error::{PaseError, Result};

/// Largest tolerated `|a_ij - a_ji|` when a symmetric-declared file lists both triangles.
pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmSymmetry {
    General,
    Symmetric,
}

fn parse_err(line: usize, message: impl Into<String>) -> PaseError {
    PaseError::MatrixMarket {
        line,
        message: message.into(),
    }
}

fn parse_header(line: &str, lineno: usize) -> Result<MmSymmetry> {
    let tokens: Vec<String> = line
        .split_whitespace()
        .map(|t| t.to_ascii_lowercase())
        .collect();
    if tokens.len() != 5 || tokens[0] != "%%matrixmarket" {
        return Err(parse_err(lineno, format!("malformed header `{line}`")));
    }
    if tokens[1] != "matrix" {
        return Err(parse_err(
            lineno,
            format!("unsupported object `{}`", tokens[1]),
        ));
    }
    if tokens[2] != "coordinate" {
        return Err(parse_err(
            lineno,
            format!("unsupported format `{}`", tokens[2]),
        ));
    }
    if tokens[3] != "real" && tokens[3] != "integer" {
        return Err(parse_err(
            lineno,
            format!("unsupported field `{}`", tokens[3]),
        ));
    }
    match tokens[4].as_str() {
        "general" => Ok(MmSymmetry::General),
        "symmetric" => Ok(MmSymmetry::Symmetric),
        other => Err(parse_err(lineno, format!("unsupported symmetry `{other}`"))),
    }
}

fn parse_index(tok: &str, bound: usize, lineno: usize, what: &str) -> Result<usize> {
    let i: usize = tok.parse().map_err(|_| {
        parse_err(
            lineno,
            format!("{what} index `{tok}` is not a positive integer"),
        )
    })?;
    if i == 0 || i > bound {
        return Err(parse_err(
            lineno,
            format!("{what} index {i} out of bounds 1..={bound}"),
        ));
    }
    Ok(i - 1)
}

/// Read a coordinate-format matrix. Indices in the file are 1-based. A symmetric file
/// may store either triangle; an entry given in both triangles must agree to
/// [`SYMMETRY_TOL`]. Repeated entries are rejected.
pub fn read_matrix_market<R: BufRead>(reader: R) -> Result<SparseMatrix> {
    let mut lines = reader.lines().enumerate();
    let sym = match lines.next() {
        Some((n, line)) => parse_header(&line?, n + 1)?,
        None => return Err(parse_err(1, "empty file")),
    };

    let mut size: Option<(usize, usize, usize)> = None;
    // key -> (value, first line, orientation as written, mirror seen)
    let mut entries: HashMap<(usize, usize), (f64, usize, (usize, usize), bool)> = HashMap::new();
    let mut order: Vec<(usize, usize)> = Vec::new();
    let mut seen = 0usize;
    let mut last = 1usize;
    for (n, line) in lines {
        let lineno = n + 1;
        last = lineno;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('%') {
            continue;
        }
        let toks: Vec<&str> = trimmed.split_whitespace().collect();
        let Some((nrows, ncols, nnz)) = size else {
            if toks.len() != 3 {
                return Err(parse_err(lineno, "size line must be `rows cols entries`"));
            }
            let mut v = [0usize; 3];
            for (slot, t) in v.iter_mut().zip(&toks) {
                *slot = t.parse().map_err(|_| {
                    parse_err(lineno, format!("size `{t}` is not a non-negative integer"))
                })?;
            }
            if sym == MmSymmetry::Symmetric && v[0] != v[1] {
                return Err(parse_err(lineno, "symmetric matrix must be square"));
            }
            size = Some((v[0], v[1], v[2]));
            continue;
        };
        if toks.len() != 3 {
            return Err(parse_err(lineno, "entry line must be `row col value`"));
        }
        seen += 1;
        if seen > nnz {
            return Err(parse_err(
                lineno,
                format!("more entries than the declared {nnz}"),
            ));
        }
        let i = parse_index(toks[0], nrows, lineno, "row")?;
        let j = parse_index(toks[1], ncols, lineno, "column")?;
        let v: f64 = toks[2]
            .parse()
            .map_err(|_| parse_err(lineno, format!("value `{}` is not a number", toks[2])))?;
        if !v.is_finite() {
            return Err(parse_err(
                lineno,
                format!("value `{}` is not finite", toks[2]),
            ));
        }
        let key = match sym {
            MmSymmetry::General => (i, j),
            MmSymmetry::Symmetric => (i.max(j), i.min(j)),
        };
        match entries.get_mut(&key) {
            None => {
                entries.insert(key, (v, lineno, (i, j), false));
                order.push(key);
            }
            Some((w, first, orig, mirrored)) => {
                if *orig == (i, j) || *mirrored {
                    return Err(parse_err(
                        lineno,
                        format!(
                            "repeated entry ({}, {}), first at line {first}",
                            i + 1,
                            j + 1
                        ),
                    ));
                }
                if (*w - v).abs() > SYMMETRY_TOL {
                    return Err(parse_err(
                        lineno,
                        format!(
                            "asymmetric entry ({}, {}): {v:e} vs {w:e} in a symmetric file",
                            i + 1,
                            j + 1
                        ),
                    ));
                }
                *mirrored = true;
            }
        }
    }
    let Some((nrows, ncols, nnz)) = size else {
        return Err(parse_err(1, "missing size line"));
    };
    if seen != nnz {
        return Err(parse_err(
            last,
            format!("declared {nnz} entries, found {seen}"),
        ));
    }

    let mut triplets = Vec::with_capacity(2 * order.len());
    for key in order {
        let (v, ..) = entries[&key];
        triplets.push((key.0, key.1, v));
        if sym == MmSymmetry::Symmetric && key.0 != key.1 {
            triplets.push((key.1, key.0, v));
        }
    }
    SparseMatrix::from_triplets(nrows, ncols, &triplets)
}

pub fn read_matrix_market_file(path: impl AsRef<Path>) -> Result<SparseMatrix> {
    read_matrix_market(BufReader::new(File::open(path)?))
}

/// Write a sparse matrix; values carry 17 significant digits so a re-read is bit-exact.
/// Symmetric output stores the lower triangle and requires exact symmetry.
pub fn write_matrix_market<W: Write>(mut w: W, m: &SparseMatrix, sym: MmSymmetry) -> Result<()> {
    let triplets: Vec<(usize, usize, f64)> = match sym {
        MmSymmetry::General => m.triplets(),
        MmSymmetry::Symmetric => {
            let asym = m.asymmetry();
            if asym != 0.0 {
                return Err(PaseError::InvalidArgument(format!(
                    "matrix written as symmetric has asymmetry {asym:e}"
                )));
            }
            m.triplets()
                .into_iter()
                .filter(|&(i, j, _)| j <= i)
                .collect()
        }
    };
    let kind = match sym {
        MmSymmetry::General => "general",
        MmSymmetry::Symmetric => "symmetric",
    };
    writeln!(w, "%%MatrixMarket matrix coordinate real {kind}")?;
    writeln!(w, "{} {} {}", m.nrows(), m.ncols(), triplets.len())?;
    for (i, j, v) in triplets {
        writeln!(w, "{} {} {:.16e}", i + 1, j + 1, v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_matrix_market_file(
    path: impl AsRef<Path>,
    m: &SparseMatrix,
    sym: MmSymmetry,
) -> Result<()> {
    write_matrix_market(BufWriter::new(File::create(path)?), m, sym)
}

/// Dump the nonzero entries of a dense matrix as a general coordinate file.
pub fn write_dense_matrix_market<W: Write>(mut w: W, d: &DenseMatrix) -> Result<()> {
    let mut entries = Vec::new();
    for i in 0..d.nrows() {
        for (j, &v) in d.row(i).iter().enumerate() {
            if v != 0.0 {
                entries.push((i, j, v));
            }
        }
    }
    writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
    writeln!(w, "{} {} {}", d.nrows(), d.ncols(), entries.len())?;
    for (i, j, v) in entries {
        writeln!(w, "{} {} {:.16e}", i + 1, j + 1, v)?;
    }
    w.flush()?;
    Ok(())
}
