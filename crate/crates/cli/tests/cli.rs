//! End-to-end runs of the `pase` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use pase_cli::config::{Coefficients, MeshSpec};
use pase_cli::run::square_hierarchy;
use pase_core::linalg::read_matrix_market_file;
use serde_json::Value;

fn pase(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_pase"))
        .args(args)
        .output()
        .unwrap();
    let text =
        String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap(), text)
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run_config(dir: &Path, name: &str, text: &str) -> (i32, PathBuf, String) {
    let cfg = write_config(dir, name, text);
    let out = dir.join(format!("{name}.out"));
    let (code, msg) = pase(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    (code, out, msg)
}

fn summary(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap()
}

fn eigenvalues(out: &Path) -> Vec<(f64, f64)> {
    let text = fs::read_to_string(out.join("eigenvalues.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("index,lambda,residual"));
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            assert_eq!(f[0].parse::<usize>().unwrap(), i);
            (f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect()
}

const SQUARE: &str = "[run]\nmode = square-convergence\nseed = 3\n[mesh]\ncoarse_n = 8\nfine_n = 32\n[solver]\nnev = 5\n";

#[test]
fn square_run_reports_five_converged_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out, msg) = run_config(dir.path(), "square.ini", SQUARE);
    assert_eq!(code, 0, "{msg}");
    let ev = eigenvalues(&out);
    assert_eq!(ev.len(), 5);
    let two_pi2 = 2.0 * std::f64::consts::PI.powi(2);
    assert!(
        ev[0].0 > two_pi2 && (ev[0].0 - two_pi2) / two_pi2 < 0.02,
        "{}",
        ev[0].0
    );
    assert!(ev.iter().all(|&(_, r)| r <= 1e-8));
    let s = summary(&out);
    assert_eq!(s["mode"], "square-convergence");
    assert_eq!(s["ndofs_fine"], 961);
    assert_eq!(s["ndofs_coarse"], 49);
    assert_eq!(s["all_converged"], true);
    assert_eq!(s["details"]["all_above_analytic"], true);
    let hist = fs::read_to_string(out.join("history.csv")).unwrap();
    assert!(hist.starts_with("stage,iteration,pair,lambda,residual\nmain,0,0,"));
}

#[test]
fn reports_are_byte_identical_for_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (_, a, _) = run_config(dir.path(), "a.ini", SQUARE);
    let (_, b, _) = run_config(dir.path(), "b.ini", SQUARE);
    for f in ["eigenvalues.csv", "history.csv", "summary.json"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn precond_compare_agrees_across_modes() {
    let dir = tempfile::tempdir().unwrap();
    let text = SQUARE
        .replace("square-convergence", "precond-compare")
        .replace("fine_n = 32", "fine_n = 16");
    let (code, out, msg) = run_config(dir.path(), "pc.ini", &text);
    assert_eq!(code, 0, "{msg}");
    let s = summary(&out);
    assert_eq!(s["details"]["agreement"], true);
    assert_eq!(s["details"]["mode_a_coupling_zero"], true);
    assert!(s["details"]["max_relative_difference"].as_f64().unwrap() <= 1e-9);
    for m in ["none", "A", "B", "B-A"] {
        assert!(out.join(format!("eigenvalues_{m}.csv")).exists());
    }
}

#[test]
fn two_batches_equal_one_run() {
    let dir = tempfile::tempdir().unwrap();
    let single = SQUARE
        .replace("nev = 5", "nev = 6")
        .replace("coarse_n = 8", "coarse_n = 16");
    let batched = format!(
        "{}[batch]\nsizes = 3, 3\n",
        single.replace("square-convergence", "batch")
    );
    let (c1, o1, m1) = run_config(dir.path(), "one.ini", &single);
    let (c2, o2, m2) = run_config(dir.path(), "two.ini", &batched);
    assert_eq!((c1, c2), (0, 0), "{m1}\n{m2}");
    for ((a, _), (b, _)) in eigenvalues(&o1).iter().zip(&eigenvalues(&o2)) {
        assert!((a - b).abs() <= 1e-8 * a, "{a} vs {b}");
    }
    assert_eq!(summary(&o2)["stages"].as_array().unwrap().len(), 2);
}

#[test]
fn exported_pencil_round_trips_and_solves_algebraically() {
    let dir = tempfile::tempdir().unwrap();
    let text = SQUARE.replace("fine_n = 32", "fine_n = 16") + "[output]\nexport_matrices = true\n";
    let (code, square_out, msg) = run_config(dir.path(), "export.ini", &text);
    assert_eq!(code, 0, "{msg}");

    let h = square_hierarchy(&MeshSpec {
        coarse_n: 8,
        fine_n: 16,
        coefficients: Coefficients::Constant,
    })
    .unwrap();
    assert_eq!(
        read_matrix_market_file(square_out.join("A.mtx")).unwrap(),
        *h.fine_a
    );
    assert_eq!(
        read_matrix_market_file(square_out.join("B.mtx")).unwrap(),
        *h.fine_b
    );
    assert_eq!(
        read_matrix_market_file(square_out.join("P.mtx")).unwrap(),
        *h.prolong
    );

    let alg = format!(
        "mode = algebraic\nseed = 3\n[solver]\nnev = 5\n[files]\nmatrix_a = {0}/A.mtx\nmatrix_b = {0}/B.mtx\nprolongation = {0}/P.mtx\n",
        square_out.display()
    );
    let (code, alg_out, msg) = run_config(dir.path(), "alg.ini", &alg);
    assert_eq!(code, 0, "{msg}");
    for ((a, _), (b, _)) in eigenvalues(&square_out).iter().zip(&eigenvalues(&alg_out)) {
        assert!((a - b).abs() <= 1e-10 * a, "{a} vs {b}");
    }
    let s = summary(&alg_out);
    assert_eq!(s["details"]["coarse_source"], "galerkin");
    assert_eq!(s["details"]["galerkin_defect"], 0.0);
}

#[test]
fn relative_matrix_paths_follow_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("problem");
    fs::create_dir(&sub).unwrap();
    fs::write(
        sub.join("a.mtx"),
        "%%MatrixMarket matrix coordinate real symmetric\n2 2 3\n1 1 2\n2 1 -1\n2 2 2\n",
    )
    .unwrap();
    fs::write(
        sub.join("b.mtx"),
        "%%MatrixMarket matrix coordinate real symmetric\n2 2 2\n1 1 1\n2 2 1\n",
    )
    .unwrap();
    fs::write(
        sub.join("p.mtx"),
        "%%MatrixMarket matrix coordinate real general\n2 1 2\n1 1 1\n2 1 1\n",
    )
    .unwrap();
    let cfg = write_config(&sub, "run.ini", "mode = algebraic\n[solver]\nnev = 1\n[files]\nmatrix_a = a.mtx\nmatrix_b = b.mtx\nprolongation = p.mtx\n");
    let out = dir.path().join("out");
    let (code, msg) = pase(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{msg}");
    let ev = eigenvalues(&out);
    assert!((ev[0].0 - 1.0).abs() < 1e-12);
}

#[test]
fn adaptive_run_writes_indicator_files() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out, msg) = run_config(
        dir.path(),
        "adapt.ini",
        "mode = adaptive-lshape\n[adaptive]\nlevel0_n = 4\nrounds = 3\n[solver]\nnev = 2\n",
    );
    assert_eq!(code, 0, "{msg}");
    let s = summary(&out);
    let rounds = s["details"]["rounds"].as_array().unwrap();
    assert_eq!(rounds.len(), 3);
    for r in rounds {
        let k = r["round"].as_u64().unwrap();
        let csv = fs::read_to_string(out.join(format!("indicators/round_{k:02}.csv"))).unwrap();
        assert_eq!(
            csv.lines().count() as u64,
            r["triangles"].as_u64().unwrap() + 1
        );
        assert_eq!(csv.lines().next(), Some("triangle,eta2"));
    }
    assert_eq!(
        fs::read_to_string(out.join("rounds.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );
    assert_eq!(eigenvalues(&out).len(), 2);
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let text = "[mesh]\ncoarse_n = 4\nfine_n = 8\n[solver]\nnev = 2\n";
    let cfg = write_config(dir.path(), "nomode.ini", text);
    let out = dir.path().join("o");
    let (code, msg) = pase(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 2, "{msg}");
    assert!(msg.contains("missing `mode`"));
    let (code, msg) = pase(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--mode",
        "square-convergence",
        "--seed",
        "11",
        "--threads",
        "1",
    ]);
    assert_eq!(code, 0, "{msg}");
    assert_eq!(summary(&out)["seed"], 11);
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = pase(&["--config", dir.path().join("absent.ini").to_str().unwrap()]);
    assert_eq!(code, 3);
    let (code, _, msg) = run_config(dir.path(), "bad.ini", &format!("{SQUARE}colour = blue\n"));
    assert_eq!(code, 2);
    assert!(msg.contains("solver.colour"), "{msg}");
    let (code, _, msg) = run_config(
        dir.path(),
        "files.ini",
        "mode = algebraic\n[solver]\nnev = 1\n[files]\nmatrix_a = x.mtx\nmatrix_b = x.mtx\nprolongation = x.mtx\n",
    );
    assert_eq!(code, 3, "{msg}");
    let (code, out, msg) = run_config(
        dir.path(),
        "short.ini",
        &format!("{SQUARE}max_outer = 1\ntol = 1e-14\n"),
    );
    assert_eq!(code, 1, "{msg}");
    assert_eq!(summary(&out)["all_converged"], false);
}

#[test]
fn duplicate_keys_are_reported_and_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out, msg) = run_config(dir.path(), "dup.ini", &format!("{SQUARE}nev = 2\n"));
    assert_eq!(code, 0);
    assert!(msg.contains("duplicate key"), "{msg}");
    let s = summary(&out);
    assert_eq!(s["nev"], 2);
    assert_eq!(s["warnings"][0]["key"], "solver.nev");
}
