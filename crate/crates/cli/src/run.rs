//! Mode execution and report files.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use pase_core::adaptive::{adaptive_solve, laplace_pencil, AdaptiveConfig, AdaptiveRound};
use pase_core::augmented::{assemble_augmented, AugmentedVector, PrecondMode, Side};
use pase_core::driver::{
    batch_solve, check_convergence, fine_residuals, pase_solve, ConvergenceReport, Hierarchy,
    PaseConfig,
};
use pase_core::fem::{
    build_lshape_mesh, build_unit_square_mesh, refine_uniform, variable_coefficients, Diffusion,
    FeSpace, Potential,
};
use pase_core::{DenseMatrix, MultiVector, PaseError};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{
    Coefficients, ConfigError, ConfigWarning, MeshSpec, Mode, RawConfig, RunConfig,
};
use crate::pencil_io::{export_pencil, load_pencil};

pub const EXIT_OK: i32 = 0;
pub const EXIT_NOT_CONVERGED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;
pub const EXIT_CAPTURE: i32 = 5;

/// Pairwise eigenvalue agreement required across precondition modes.
pub const MODE_AGREEMENT_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(#[from] ConfigError),
    #[error("cannot read {path}: {source}")]
    ReadConfig {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("output error: {0}")]
    Output(#[from] std::io::Error),
    #[error("output error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Solver(#[from] PaseError),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => EXIT_CONFIG,
            RunError::ReadConfig { .. } | RunError::Output(_) | RunError::Json(_) => EXIT_INPUT,
            RunError::Solver(e) => match e {
                PaseError::Io(_)
                | PaseError::MatrixMarket { .. }
                | PaseError::DimensionMismatch { .. }
                | PaseError::Nesting(_)
                | PaseError::Mesh(_)
                | PaseError::InvalidArgument(_) => EXIT_INPUT,
                PaseError::CaptureFailure { .. } => EXIT_CAPTURE,
                _ => EXIT_NUMERICAL,
            },
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// Read, parse and validate a configuration file. Relative matrix paths are
/// taken relative to the file's directory.
pub fn load_run_config(
    path: &Path,
    ov: &Overrides,
) -> Result<(RunConfig, Vec<ConfigWarning>), RunError> {
    let text = fs::read_to_string(path).map_err(|source| RunError::ReadConfig {
        path: path.to_path_buf(),
        source,
    })?;
    let raw = RawConfig::parse(&text)?;
    let mut cfg = raw.resolve(ov.mode)?;
    if let Some(out) = &ov.out {
        cfg.output = out.clone();
    }
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
        cfg.pase.seed = seed;
    }
    if let (Some(files), Some(base)) = (cfg.files.as_mut(), path.parent()) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut files.matrix_a);
        fix(&mut files.matrix_b);
        fix(&mut files.prolongation);
        if let Some((a, b)) = files.coarse.as_mut() {
            fix(a);
            fix(b);
        }
    }
    Ok((cfg, raw.warnings))
}

#[derive(Debug, Clone, Serialize)]
pub struct StageSummary {
    pub name: String,
    pub outer_iterations: usize,
    pub contraction_factor: f64,
    pub contraction_factors: Vec<f64>,
    pub aug_sweeps: usize,
    pub normal_equation_iterations: usize,
    pub converged: Vec<bool>,
}

impl StageSummary {
    fn new(name: &str, r: &ConvergenceReport) -> Self {
        StageSummary {
            name: name.to_string(),
            outer_iterations: r.outer_iterations,
            contraction_factor: r.contraction_factor,
            contraction_factors: r.contraction_factors.clone(),
            aug_sweeps: r.aug_sweeps.iter().sum(),
            normal_equation_iterations: r.normal_equation_iterations,
            converged: r.converged.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub mode: Mode,
    pub seed: u64,
    pub nev: usize,
    pub tol: f64,
    pub precond_mode: PrecondMode,
    pub ndofs_coarse: usize,
    pub ndofs_fine: usize,
    pub eigenvalues: Vec<f64>,
    pub residuals: Vec<f64>,
    pub converged: Vec<bool>,
    pub all_converged: bool,
    pub stages: Vec<StageSummary>,
    pub warnings: Vec<ConfigWarning>,
    pub details: Value,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: Summary,
    pub output: PathBuf,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.summary.all_converged {
            EXIT_OK
        } else {
            EXIT_NOT_CONVERGED
        }
    }
}

/// 17 significant digits, enough to recover the exact double.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn eigenvalues_csv(values: &[f64], residuals: &[f64]) -> String {
    let mut s = String::from("index,lambda,residual\n");
    for (i, (v, r)) in values.iter().zip(residuals).enumerate() {
        let _ = writeln!(s, "{i},{},{}", fmt17(*v), fmt17(*r));
    }
    s
}

fn history_csv(stages: &[(String, &ConvergenceReport)]) -> String {
    let mut s = String::from("stage,iteration,pair,lambda,residual\n");
    for (name, r) in stages {
        for (it, (res, vals)) in r.residual_history.iter().zip(&r.value_history).enumerate() {
            for (j, (x, v)) in res.iter().zip(vals).enumerate() {
                let _ = writeln!(s, "{name},{it},{j},{},{}", fmt17(*v), fmt17(*x));
            }
        }
    }
    s
}

/// Unit-square hierarchy: `coarse_n` cells per side, refined uniformly to `fine_n`.
pub fn square_hierarchy(spec: &MeshSpec) -> Result<Hierarchy, PaseError> {
    let coarse = build_unit_square_mesh(spec.coarse_n)?;
    let mut fine = coarse.clone();
    let mut n = spec.coarse_n;
    while n < spec.fine_n {
        fine = refine_uniform(&fine);
        n *= 2;
    }
    let (d, p) = match spec.coefficients {
        Coefficients::Constant => (Diffusion::Identity, Potential::Zero),
        Coefficients::Variable => variable_coefficients(),
    };
    Hierarchy::from_spaces(&FeSpace::new(coarse), &FeSpace::new(fine), &d, &p)
}

/// The `count` smallest `(m² + n²)π²`, `m, n ≥ 1`, with multiplicity.
pub fn analytic_square_eigenvalues(count: usize) -> Vec<f64> {
    let side = (count as f64).sqrt().ceil() as usize + 2;
    let mut all: Vec<usize> = (1..=side * 2)
        .flat_map(|m| (1..=side * 2).map(move |n| m * m + n * n))
        .collect();
    all.sort_unstable();
    all.into_iter()
        .take(count)
        .map(|s| s as f64 * PI * PI)
        .collect()
}

struct Solved {
    values: Vec<f64>,
    vectors: MultiVector,
    stages: Vec<(String, ConvergenceReport)>,
    details: Value,
}

fn solve(hier: &Hierarchy, cfg: &PaseConfig) -> Result<Solved, PaseError> {
    if cfg.batch.is_some() {
        let out = batch_solve(hier, cfg)?;
        let stages = out
            .reports
            .iter()
            .enumerate()
            .map(|(i, r)| (format!("batch{}", i + 1), r.clone()))
            .collect();
        Ok(Solved {
            values: out.values,
            vectors: out.vectors,
            stages,
            details: json!({ "thetas": out.thetas, "candidates": out.candidates }),
        })
    } else {
        let out = pase_solve(hier, cfg)?;
        Ok(Solved {
            values: out.values,
            vectors: out.vectors,
            stages: vec![("main".to_string(), out.report)],
            details: Value::Null,
        })
    }
}

struct Files<'a> {
    dir: &'a Path,
}

impl Files<'_> {
    fn write(&self, name: &str, text: &str) -> Result<(), RunError> {
        fs::write(self.dir.join(name), text)?;
        Ok(())
    }
}

fn base_summary(cfg: &RunConfig, warnings: &[ConfigWarning], hier: &Hierarchy) -> Summary {
    Summary {
        mode: cfg.mode,
        seed: cfg.seed,
        nev: cfg.pase.nev,
        tol: cfg.pase.tol,
        precond_mode: cfg.pase.precond_mode,
        ndofs_coarse: hier.coarse_dim(),
        ndofs_fine: hier.fine_dim(),
        eigenvalues: Vec::new(),
        residuals: Vec::new(),
        converged: Vec::new(),
        all_converged: false,
        stages: Vec::new(),
        warnings: warnings.to_vec(),
        details: Value::Null,
    }
}

/// Run one solve on `hier`, write the eigenvalue and history files and fill the
/// common summary fields.
fn single_run(
    cfg: &RunConfig,
    warnings: &[ConfigWarning],
    hier: &Hierarchy,
    files: &Files,
) -> Result<Summary, RunError> {
    let solved = solve(hier, &cfg.pase)?;
    let residuals = fine_residuals(&hier.fine_a, &hier.fine_b, &solved.values, &solved.vectors)?;
    let converged = check_convergence(
        &hier.fine_a,
        &hier.fine_b,
        &solved.values,
        &solved.vectors,
        cfg.pase.tol,
    )?;
    files.write(
        "eigenvalues.csv",
        &eigenvalues_csv(&solved.values, &residuals),
    )?;
    let stages: Vec<(String, &ConvergenceReport)> =
        solved.stages.iter().map(|(n, r)| (n.clone(), r)).collect();
    files.write("history.csv", &history_csv(&stages))?;
    let mut s = base_summary(cfg, warnings, hier);
    s.all_converged = converged.iter().all(|&c| c);
    s.eigenvalues = solved.values;
    s.residuals = residuals;
    s.converged = converged;
    s.stages = solved
        .stages
        .iter()
        .map(|(n, r)| StageSummary::new(n, r))
        .collect();
    s.details = solved.details;
    Ok(s)
}

fn run_square(
    cfg: &RunConfig,
    warnings: &[ConfigWarning],
    files: &Files,
) -> Result<Summary, RunError> {
    let spec = cfg.mesh.as_ref().expect("validated meshed mode");
    let hier = square_hierarchy(spec)?;
    if cfg.export_matrices {
        export_pencil(files.dir, &hier)?;
    }
    let mut s = single_run(cfg, warnings, &hier, files)?;
    if spec.coefficients == Coefficients::Constant {
        let exact = analytic_square_eigenvalues(s.eigenvalues.len());
        let rel: Vec<f64> = s
            .eigenvalues
            .iter()
            .zip(&exact)
            .map(|(v, e)| (v - e) / e)
            .collect();
        let above = rel.iter().all(|&r| r > 0.0);
        let extra =
            json!({ "analytic": exact, "relative_errors": rel, "all_above_analytic": above });
        s.details = merge(s.details, extra);
    }
    Ok(s)
}

fn merge(a: Value, b: Value) -> Value {
    match (a, b) {
        (Value::Object(mut x), Value::Object(y)) => {
            x.extend(y);
            Value::Object(x)
        }
        (Value::Null, y) => y,
        (x, _) => x,
    }
}

/// Whether decoupling the A side leaves no A-side coupling work: the coupling
/// block is exactly zero and a matrix-vector product evaluates no coupling products.
pub fn mode_a_coupling_is_zero(hier: &Hierarchy, u: &MultiVector) -> Result<bool, PaseError> {
    let p = assemble_augmented(
        Arc::clone(&hier.coarse_a),
        Arc::clone(&hier.coarse_b),
        &hier.fine_a,
        &hier.fine_b,
        &hier.restrict,
        u,
    )?;
    let (t, _) = p.precond_transform(PrecondMode::A)?;
    let x = AugmentedVector::new(
        MultiVector::from_columns(t.coarse_dim(), &[vec![1.0; t.coarse_dim()]]),
        DenseMatrix::from_rows(&vec![vec![1.0]; t.k()]),
    )?;
    t.aug_matvec(Side::A, &x)?;
    Ok(t.a_h().max_abs() == 0.0 && t.coupling_products(Side::A) == 0)
}

fn run_precond_compare(
    cfg: &RunConfig,
    warnings: &[ConfigWarning],
    files: &Files,
) -> Result<Summary, RunError> {
    let spec = cfg.mesh.as_ref().expect("validated meshed mode");
    let hier = square_hierarchy(spec)?;
    if cfg.export_matrices {
        export_pencil(files.dir, &hier)?;
    }
    let mut runs = Vec::new();
    for mode in PrecondMode::ALL {
        let mut pc = cfg.pase.clone();
        pc.precond_mode = mode;
        let solved = solve(&hier, &pc)?;
        let residuals =
            fine_residuals(&hier.fine_a, &hier.fine_b, &solved.values, &solved.vectors)?;
        let converged = check_convergence(
            &hier.fine_a,
            &hier.fine_b,
            &solved.values,
            &solved.vectors,
            pc.tol,
        )?;
        files.write(
            &format!("eigenvalues_{mode}.csv"),
            &eigenvalues_csv(&solved.values, &residuals),
        )?;
        runs.push((mode, solved, residuals, converged));
    }
    let mut max_diff = 0.0f64;
    for (i, a) in runs.iter().enumerate() {
        for b in &runs[i + 1..] {
            for (x, y) in a.1.values.iter().zip(&b.1.values) {
                max_diff = max_diff.max((x - y).abs() / y.abs());
            }
        }
    }
    let coupling_zero = mode_a_coupling_is_zero(&hier, &runs[0].1.vectors)?;

    let stages: Vec<(String, &ConvergenceReport)> = runs
        .iter()
        .flat_map(|(m, s, _, _)| s.stages.iter().map(move |(n, r)| (format!("{m}/{n}"), r)))
        .collect();
    files.write("history.csv", &history_csv(&stages))?;
    let (_, first, res0, _) = &runs[0];
    files.write("eigenvalues.csv", &eigenvalues_csv(&first.values, res0))?;

    let mut s = base_summary(cfg, warnings, &hier);
    s.eigenvalues = first.values.clone();
    s.residuals = res0.clone();
    s.converged = (0..first.values.len())
        .map(|j| runs.iter().all(|r| r.3[j]))
        .collect();
    s.all_converged = s.converged.iter().all(|&c| c);
    s.stages = stages
        .iter()
        .map(|(n, r)| StageSummary::new(n, r))
        .collect();
    let per_mode: serde_json::Map<String, Value> = runs
        .iter()
        .map(|(m, sv, _, _)| (m.to_string(), json!(sv.values)))
        .collect();
    s.details = json!({
        "eigenvalues_by_mode": per_mode,
        "max_relative_difference": max_diff,
        "agreement_tol": MODE_AGREEMENT_TOL,
        "agreement": max_diff <= MODE_AGREEMENT_TOL,
        "mode_a_coupling_zero": coupling_zero,
    });
    Ok(s)
}

fn run_batch(
    cfg: &RunConfig,
    warnings: &[ConfigWarning],
    files: &Files,
) -> Result<Summary, RunError> {
    let spec = cfg.mesh.as_ref().expect("validated meshed mode");
    let hier = square_hierarchy(spec)?;
    if cfg.export_matrices {
        export_pencil(files.dir, &hier)?;
    }
    single_run(cfg, warnings, &hier, files)
}

fn run_algebraic(
    cfg: &RunConfig,
    warnings: &[ConfigWarning],
    files: &Files,
) -> Result<Summary, RunError> {
    let f = cfg.files.as_ref().expect("validated algebraic mode");
    let coarse = f.coarse.as_ref().map(|(a, b)| (a.as_path(), b.as_path()));
    let hier = load_pencil(&f.matrix_a, &f.matrix_b, &f.prolongation, coarse)?;
    let mut s = single_run(cfg, warnings, &hier, files)?;
    let extra = json!({
        "coarse_source": if coarse.is_some() { "files" } else { "galerkin" },
        "galerkin_defect": hier.galerkin_defect()?,
    });
    s.details = merge(s.details, extra);
    Ok(s)
}

fn rounds_csv(rounds: &[AdaptiveRound], nev: usize) -> String {
    let mut s = String::from("round,ndofs,triangles,eta2,marked,outer_iterations,converged");
    for j in 0..nev {
        let _ = write!(s, ",lambda_{j}");
    }
    s.push('\n');
    for r in rounds {
        let _ = write!(
            s,
            "{},{},{},{},{},{},{}",
            r.round,
            r.ndofs,
            r.triangles,
            fmt17(r.indicators.total),
            r.marked,
            r.outer_iterations,
            r.converged
        );
        for v in &r.values {
            let _ = write!(s, ",{}", fmt17(*v));
        }
        s.push('\n');
    }
    s
}

fn run_adaptive(
    cfg: &RunConfig,
    warnings: &[ConfigWarning],
    files: &Files,
) -> Result<Summary, RunError> {
    let spec = cfg.adaptive.as_ref().expect("validated adaptive mode");
    let root = build_lshape_mesh(spec.level0_n)?;
    let root_dofs = FeSpace::new(root.clone()).ndofs();
    let acfg = AdaptiveConfig {
        rounds: spec.rounds,
        fraction: spec.fraction,
        pase: cfg.pase.clone(),
    };
    let ind_dir = files.dir.join("indicators");
    fs::create_dir_all(&ind_dir)?;
    let mut io_err: Option<std::io::Error> = None;
    let (rounds, space, vectors) = adaptive_solve(root, &acfg, |r| {
        if io_err.is_none() {
            if let Err(e) = fs::write(
                ind_dir.join(format!("round_{:02}.csv", r.round)),
                r.indicators.to_csv(),
            ) {
                io_err = Some(e);
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let last = rounds.last().expect("at least one round");
    let (a, b) = laplace_pencil(&space)?;
    let residuals = fine_residuals(&a, &b, &last.values, &vectors)?;
    let converged = check_convergence(&a, &b, &last.values, &vectors, cfg.pase.tol)?;
    files.write(
        "eigenvalues.csv",
        &eigenvalues_csv(&last.values, &residuals),
    )?;
    files.write("rounds.csv", &rounds_csv(&rounds, cfg.pase.nev))?;
    let mut hist = String::from("stage,iteration,pair,lambda,residual\n");
    for r in &rounds {
        for (j, (v, x)) in r.values.iter().zip(&r.residuals).enumerate() {
            let _ = writeln!(hist, "adaptive,{},{j},{},{}", r.round, fmt17(*v), fmt17(*x));
        }
    }
    files.write("history.csv", &hist)?;

    let all_rounds = rounds.iter().all(|r| r.converged);
    let summary_rounds: Vec<Value> = rounds
        .iter()
        .map(|r| {
            json!({
                "round": r.round, "ndofs": r.ndofs, "triangles": r.triangles, "eigenvalues": r.values,
                "eta2": r.indicators.total, "marked": r.marked, "converged": r.converged,
                "outer_iterations": r.outer_iterations,
            })
        })
        .collect();
    Ok(Summary {
        mode: cfg.mode,
        seed: cfg.seed,
        nev: cfg.pase.nev,
        tol: cfg.pase.tol,
        precond_mode: cfg.pase.precond_mode,
        ndofs_coarse: root_dofs,
        ndofs_fine: space.ndofs(),
        all_converged: all_rounds && converged.iter().all(|&c| c),
        eigenvalues: last.values.clone(),
        residuals,
        converged,
        stages: Vec::new(),
        warnings: warnings.to_vec(),
        details: json!({ "rounds": summary_rounds, "fraction": spec.fraction, "level0_n": spec.level0_n }),
    })
}

/// Execute the configured mode and write `eigenvalues.csv`, `history.csv` and
/// `summary.json` (plus mode-specific files) into the output directory.
pub fn run(cfg: &RunConfig, warnings: &[ConfigWarning]) -> Result<RunOutcome, RunError> {
    fs::create_dir_all(&cfg.output)?;
    let files = Files { dir: &cfg.output };
    let summary = match cfg.mode {
        Mode::SquareConvergence => run_square(cfg, warnings, &files)?,
        Mode::PrecondCompare => run_precond_compare(cfg, warnings, &files)?,
        Mode::Batch => run_batch(cfg, warnings, &files)?,
        Mode::AdaptiveLshape => run_adaptive(cfg, warnings, &files)?,
        Mode::Algebraic => run_algebraic(cfg, warnings, &files)?,
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    files.write("summary.json", &text)?;
    Ok(RunOutcome {
        summary,
        output: cfg.output.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_values_with_multiplicity() {
        let v = analytic_square_eigenvalues(6);
        let s: Vec<f64> = [2.0, 5.0, 5.0, 8.0, 10.0, 10.0]
            .iter()
            .map(|x| x * PI * PI)
            .collect();
        assert_eq!(v, s);
    }

    #[test]
    fn seventeen_digits_round_trip() {
        for x in [0.1, 1.0 / 3.0, 2.0 * PI * PI, 1e-300, -7.5e12] {
            let s = fmt17(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
            let mantissa = s
                .split('e')
                .next()
                .unwrap()
                .trim_start_matches('-')
                .replace('.', "");
            assert_eq!(mantissa.len(), 17);
        }
    }

    #[test]
    fn exit_codes_by_error_class() {
        assert_eq!(
            RunError::Config(ConfigError::MissingMode).exit_code(),
            EXIT_CONFIG
        );
        assert_eq!(
            RunError::Solver(PaseError::MatrixMarket {
                line: 1,
                message: String::new()
            })
            .exit_code(),
            EXIT_INPUT
        );
        assert_eq!(
            RunError::Solver(PaseError::CaptureFailure {
                batch: 1,
                score: 0.1
            })
            .exit_code(),
            EXIT_CAPTURE
        );
        assert_eq!(
            RunError::Solver(PaseError::Singular {
                context: "x",
                index: 0
            })
            .exit_code(),
            EXIT_NUMERICAL
        );
    }

    #[test]
    fn history_lists_every_pair_of_every_iteration() {
        let r = ConvergenceReport {
            residual_history: vec![vec![1.0, 2.0], vec![0.5, 0.25]],
            value_history: vec![vec![3.0, 4.0], vec![2.0, 3.0]],
            outer_iterations: 1,
            contraction_factors: vec![0.5, 0.125],
            contraction_factor: 0.125,
            final_values: vec![2.0, 3.0],
            converged: vec![true, true],
            aug_sweeps: vec![3],
            normal_equation_iterations: 0,
        };
        let csv = history_csv(&[("main".into(), &r)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "stage,iteration,pair,lambda,residual");
        assert!(lines[4].starts_with("main,1,1,3.0000000000000000e0,2.5000000000000000e-1"));
    }
}
