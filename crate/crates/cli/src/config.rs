//! The sectioned `key = value` run configuration.
//!
//! ```text
//! [run]       mode, seed, output
//! [mesh]      coarse_n, fine_n, coefficients (constant | variable)
//! [solver]    nev, tol, max_outer, cg_max_iters, cg_rel_tol, precond_mode, aug_max_sweeps
//! [batch]     sizes, oversample, shift_sign (plus | minus)
//! [adaptive]  level0_n, rounds, fraction
//! [files]     matrix_a, matrix_b, prolongation, coarse_a, coarse_b
//! [output]    export_matrices
//! ```
//!
//! `#` and `;` start comments. A repeated key keeps its last value and records a
//! warning.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use pase_core::augmented::PrecondMode;
use pase_core::driver::{BatchConfig, PaseConfig, ShiftSign};
use pase_core::solvers::BcgConfig;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    SquareConvergence,
    PrecondCompare,
    Batch,
    AdaptiveLshape,
    Algebraic,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::SquareConvergence,
        Mode::PrecondCompare,
        Mode::Batch,
        Mode::AdaptiveLshape,
        Mode::Algebraic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::SquareConvergence => "square-convergence",
            Mode::PrecondCompare => "precond-compare",
            Mode::Batch => "batch",
            Mode::AdaptiveLshape => "adaptive-lshape",
            Mode::Algebraic => "algebraic",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Coefficients {
    Constant,
    Variable,
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("missing `mode` in [run]")]
    MissingMode,
    #[error("line {line}: expected `[section]` or `key = value`, found `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown section `[{section}]`")]
    UnknownSection { line: usize, section: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("missing required key `{key}` for mode {mode}")]
    MissingKey { key: String, mode: Mode },
    #[error("line {line}: `{key}` expects {expected}, found `{value}`")]
    Type {
        line: usize,
        key: String,
        expected: &'static str,
        value: String,
    },
    #[error("`{key}`: {message}")]
    Invalid { key: String, message: String },
}

/// A non-fatal observation made while parsing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigWarning {
    pub line: usize,
    pub key: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeshSpec {
    pub coarse_n: usize,
    pub fine_n: usize,
    pub coefficients: Coefficients,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptiveSpec {
    pub level0_n: usize,
    pub rounds: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileSpec {
    pub matrix_a: PathBuf,
    pub matrix_b: PathBuf,
    pub prolongation: PathBuf,
    pub coarse: Option<(PathBuf, PathBuf)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub output: PathBuf,
    pub mesh: Option<MeshSpec>,
    pub adaptive: Option<AdaptiveSpec>,
    pub files: Option<FileSpec>,
    pub pase: PaseConfig,
    pub export_matrices: bool,
}

const KEYS: &[(&str, &[&str])] = &[
    ("run", &["mode", "seed", "output"]),
    ("mesh", &["coarse_n", "fine_n", "coefficients"]),
    (
        "solver",
        &[
            "nev",
            "tol",
            "max_outer",
            "cg_max_iters",
            "cg_rel_tol",
            "precond_mode",
            "aug_max_sweeps",
        ],
    ),
    ("batch", &["sizes", "oversample", "shift_sign"]),
    ("adaptive", &["level0_n", "rounds", "fraction"]),
    (
        "files",
        &[
            "matrix_a",
            "matrix_b",
            "prolongation",
            "coarse_a",
            "coarse_b",
        ],
    ),
    ("output", &["export_matrices"]),
];

/// Parsed but not yet validated key/value pairs.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    /// `(section.key, value, line)` with later duplicates already folded in
    entries: Vec<(String, String, usize)>,
    pub warnings: Vec<ConfigWarning>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut raw = RawConfig::default();
        let mut section: Option<&str> = None;
        for (n, line) in text.lines().enumerate() {
            let lineno = n + 1;
            let body = line.split(['#', ';']).next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            if let Some(name) = body.strip_prefix('[').and_then(|b| b.strip_suffix(']')) {
                let name = name.trim();
                match KEYS.iter().find(|(s, _)| *s == name) {
                    Some((s, _)) => section = Some(s),
                    None => {
                        return Err(ConfigError::UnknownSection {
                            line: lineno,
                            section: name.to_string(),
                        })
                    }
                }
                continue;
            }
            let Some((key, value)) = body.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: lineno,
                    text: body.to_string(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            let sec = section.unwrap_or("run");
            let allowed = KEYS
                .iter()
                .find(|(s, _)| *s == sec)
                .map(|(_, k)| *k)
                .unwrap_or(&[]);
            if !allowed.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line: lineno,
                    key: format!("{sec}.{key}"),
                });
            }
            let full = format!("{sec}.{key}");
            raw.set(full, value.to_string(), lineno);
        }
        Ok(raw)
    }

    /// Set a value; an existing one is replaced with a warning.
    pub fn set(&mut self, key: String, value: String, line: usize) {
        if let Some(slot) = self.entries.iter_mut().find(|(k, _, _)| *k == key) {
            self.warnings.push(ConfigWarning {
                line,
                key: key.clone(),
                message: format!(
                    "duplicate key; `{}` (line {}) replaced by `{value}`",
                    slot.1, slot.2
                ),
            });
            slot.1 = value;
            slot.2 = line;
        } else {
            self.entries.push((key, value, line));
        }
    }

    fn get(&self, key: &str) -> Option<(&str, usize)> {
        self.entries
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, l)| (v.as_str(), *l))
    }

    fn typed<T: FromStr>(
        &self,
        key: &str,
        expected: &'static str,
    ) -> Result<Option<T>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|_| ConfigError::Type {
                line,
                key: key.to_string(),
                expected,
                value: v.to_string(),
            }),
        }
    }

    fn required<T: FromStr>(
        &self,
        key: &str,
        expected: &'static str,
        mode: Mode,
    ) -> Result<T, ConfigError> {
        self.typed(key, expected)?.ok_or(ConfigError::MissingKey {
            key: key.to_string(),
            mode,
        })
    }

    fn choice<T>(
        &self,
        key: &str,
        expected: &'static str,
        f: impl Fn(&str) -> Option<T>,
    ) -> Result<Option<T>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some((v, line)) => f(v).map(Some).ok_or_else(|| ConfigError::Type {
                line,
                key: key.to_string(),
                expected,
                value: v.to_string(),
            }),
        }
    }

    /// Validate into a [`RunConfig`]; `mode` overrides the file's `run.mode`.
    pub fn resolve(&self, mode: Option<Mode>) -> Result<RunConfig, ConfigError> {
        let mode = match mode {
            Some(m) => m,
            None => self
                .choice("run.mode", "a mode name", |s| s.parse().ok())?
                .ok_or(ConfigError::MissingMode)?,
        };
        let seed = self
            .typed("run.seed", "an unsigned integer")?
            .unwrap_or(0u64);
        let output = self
            .typed::<PathBuf>("run.output", "a path")?
            .unwrap_or_else(|| PathBuf::from("out"));

        let mut pase = PaseConfig::new(self.required("solver.nev", "an unsigned integer", mode)?);
        pase.seed = seed;
        if let Some(t) = self.typed("solver.tol", "a real number")? {
            pase.tol = t;
        }
        if let Some(m) = self.typed("solver.max_outer", "an unsigned integer")? {
            pase.max_outer = m;
        }
        pase.cg = BcgConfig {
            max_iters: self
                .typed("solver.cg_max_iters", "an unsigned integer")?
                .unwrap_or(40),
            rel_tol: self
                .typed("solver.cg_rel_tol", "a real number")?
                .unwrap_or(1e-12),
            shift: 0.0,
        };
        if let Some(p) = self.choice("solver.precond_mode", "one of none, A, B, B-A", |s| {
            s.parse::<PrecondMode>().ok()
        })? {
            pase.precond_mode = p;
        }
        if let Some(s) = self.typed("solver.aug_max_sweeps", "an unsigned integer")? {
            pase.aug_max_sweeps = s;
        }
        if !(pase.tol > 0.0 && pase.tol < 1.0) {
            return Err(ConfigError::Invalid {
                key: "solver.tol".into(),
                message: format!("{} is outside (0, 1)", pase.tol),
            });
        }

        let sizes = self.choice("batch.sizes", "a comma-separated list of counts", |s| {
            s.split(',')
                .map(|t| t.trim().parse::<usize>().ok())
                .collect::<Option<Vec<_>>>()
        })?;
        let has_batch_keys = ["batch.oversample", "batch.shift_sign"]
            .iter()
            .any(|k| self.get(k).is_some());
        pase.batch = match sizes {
            Some(sizes) => {
                let mut b = BatchConfig::new(sizes);
                b.oversample = self.typed("batch.oversample", "an unsigned integer")?;
                if let Some(sign) =
                    self.choice("batch.shift_sign", "plus or minus", |s| match s {
                        "plus" => Some(ShiftSign::Plus),
                        "minus" => Some(ShiftSign::Minus),
                        _ => None,
                    })?
                {
                    b.shift_sign = sign;
                }
                Some(b)
            }
            None if mode == Mode::Batch || has_batch_keys => {
                return Err(ConfigError::MissingKey {
                    key: "batch.sizes".into(),
                    mode,
                })
            }
            None => None,
        };
        if let Err(e) = pase.validate() {
            return Err(ConfigError::Invalid {
                key: "solver".into(),
                message: e.to_string(),
            });
        }

        let mesh = match mode {
            Mode::SquareConvergence | Mode::PrecondCompare | Mode::Batch => {
                let coarse_n: usize =
                    self.required("mesh.coarse_n", "an unsigned integer", mode)?;
                let fine_n: usize = self.required("mesh.fine_n", "an unsigned integer", mode)?;
                if coarse_n < 2
                    || fine_n < coarse_n
                    || fine_n % coarse_n != 0
                    || !(fine_n / coarse_n).is_power_of_two()
                {
                    return Err(ConfigError::Invalid {
                        key: "mesh.fine_n".into(),
                        message: format!("fine_n = {fine_n} must be coarse_n = {coarse_n} (>= 2) times a power of two"),
                    });
                }
                let coefficients = self
                    .choice("mesh.coefficients", "constant or variable", |s| match s {
                        "constant" => Some(Coefficients::Constant),
                        "variable" => Some(Coefficients::Variable),
                        _ => None,
                    })?
                    .unwrap_or(Coefficients::Constant);
                Some(MeshSpec {
                    coarse_n,
                    fine_n,
                    coefficients,
                })
            }
            _ => None,
        };

        let adaptive = match mode {
            Mode::AdaptiveLshape => {
                let level0_n: usize =
                    self.required("adaptive.level0_n", "an unsigned integer", mode)?;
                if level0_n < 2 || level0_n % 2 != 0 {
                    return Err(ConfigError::Invalid {
                        key: "adaptive.level0_n".into(),
                        message: format!("{level0_n} must be even and at least 2"),
                    });
                }
                let rounds = self
                    .typed("adaptive.rounds", "an unsigned integer")?
                    .unwrap_or(12);
                let fraction: f64 = self
                    .typed("adaptive.fraction", "a real number")?
                    .unwrap_or(0.4);
                if rounds == 0 || !(fraction > 0.0 && fraction <= 1.0) {
                    return Err(ConfigError::Invalid {
                        key: "adaptive".into(),
                        message: "rounds must be positive and fraction in (0, 1]".into(),
                    });
                }
                Some(AdaptiveSpec {
                    level0_n,
                    rounds,
                    fraction,
                })
            }
            _ => None,
        };

        let files = match mode {
            Mode::Algebraic => {
                let path = |k: &str| self.required::<PathBuf>(k, "a path", mode);
                let coarse = match (self.get("files.coarse_a"), self.get("files.coarse_b")) {
                    (Some((a, _)), Some((b, _))) => Some((PathBuf::from(a), PathBuf::from(b))),
                    (None, None) => None,
                    (Some(_), None) => {
                        return Err(ConfigError::MissingKey {
                            key: "files.coarse_b".into(),
                            mode,
                        })
                    }
                    (None, Some(_)) => {
                        return Err(ConfigError::MissingKey {
                            key: "files.coarse_a".into(),
                            mode,
                        })
                    }
                };
                Some(FileSpec {
                    matrix_a: path("files.matrix_a")?,
                    matrix_b: path("files.matrix_b")?,
                    prolongation: path("files.prolongation")?,
                    coarse,
                })
            }
            _ => None,
        };

        let export_matrices = self
            .typed("output.export_matrices", "true or false")?
            .unwrap_or(false);
        if export_matrices && mesh.is_none() {
            return Err(ConfigError::Invalid {
                key: "output.export_matrices".into(),
                message: format!("only meshed modes can export matrices, not {mode}"),
            });
        }

        Ok(RunConfig {
            mode,
            seed,
            output,
            mesh,
            adaptive,
            files,
            pase,
            export_matrices,
        })
    }
}

/// Parse and validate a configuration text; warnings come back alongside.
pub fn parse_config(text: &str) -> Result<(RunConfig, Vec<ConfigWarning>), ConfigError> {
    let raw = RawConfig::parse(text)?;
    let cfg = raw.resolve(None)?;
    Ok((cfg, raw.warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str =
        "[run]\nmode = square-convergence\n[mesh]\ncoarse_n = 4\nfine_n = 16\n[solver]\nnev = 3\n";

    #[test]
    fn minimal_square_config_uses_defaults() {
        let (cfg, warnings) = parse_config(MINIMAL).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(cfg.mode, Mode::SquareConvergence);
        assert_eq!(cfg.pase.tol, 1e-8);
        assert_eq!(cfg.pase.cg.max_iters, 40);
        assert_eq!(cfg.pase.max_outer, 30);
        assert_eq!(cfg.pase.precond_mode, PrecondMode::None);
        assert_eq!(cfg.seed, 0);
        assert_eq!(
            cfg.mesh,
            Some(MeshSpec {
                coarse_n: 4,
                fine_n: 16,
                coefficients: Coefficients::Constant
            })
        );
    }

    #[test]
    fn empty_text_is_missing_mode() {
        assert_eq!(parse_config("").unwrap_err(), ConfigError::MissingMode);
        assert_eq!(
            parse_config("# only a comment\n\n").unwrap_err(),
            ConfigError::MissingMode
        );
    }

    #[test]
    fn duplicate_key_last_wins_with_warning() {
        let (cfg, warnings) = parse_config(&format!("{MINIMAL}nev = 5\n")).unwrap();
        assert_eq!(cfg.pase.nev, 5);
        assert_eq!(warnings.len(), 1);
        assert_eq!(warnings[0].key, "solver.nev");
        assert_eq!(warnings[0].line, 8);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = parse_config(&format!("{MINIMAL}nevv = 5\n")).unwrap_err();
        assert_eq!(
            e,
            ConfigError::UnknownKey {
                line: 8,
                key: "solver.nevv".into()
            }
        );
        assert!(matches!(
            parse_config("[mystery]\n").unwrap_err(),
            ConfigError::UnknownSection { line: 1, .. }
        ));
    }

    #[test]
    fn missing_required_key_is_named() {
        let e = parse_config("mode = batch\n[mesh]\ncoarse_n = 4\nfine_n = 8\n[solver]\nnev = 4\n")
            .unwrap_err();
        assert_eq!(
            e,
            ConfigError::MissingKey {
                key: "batch.sizes".into(),
                mode: Mode::Batch
            }
        );
        let e = parse_config("mode = square-convergence\n[solver]\nnev = 4\n").unwrap_err();
        assert!(matches!(e, ConfigError::MissingKey { ref key, .. } if key == "mesh.coarse_n"));
    }

    #[test]
    fn type_mismatch_is_named() {
        let e = parse_config(&MINIMAL.replace("nev = 3", "nev = three")).unwrap_err();
        assert!(
            matches!(e, ConfigError::Type { line: 7, ref key, .. } if key == "solver.nev"),
            "{e}"
        );
        let e = parse_config(&format!("{MINIMAL}precond_mode = C\n")).unwrap_err();
        assert!(matches!(e, ConfigError::Type { ref key, .. } if key == "solver.precond_mode"));
        let e = parse_config("mode = sideways\n").unwrap_err();
        assert!(matches!(e, ConfigError::Type { ref key, .. } if key == "run.mode"));
    }

    #[test]
    fn tolerance_must_lie_in_the_unit_interval() {
        for t in ["0", "1", "-1e-8", "2"] {
            let e = parse_config(&format!("{MINIMAL}tol = {t}\n")).unwrap_err();
            assert!(
                matches!(e, ConfigError::Invalid { ref key, .. } if key == "solver.tol"),
                "{t}: {e}"
            );
        }
    }

    #[test]
    fn mesh_sizes_must_nest() {
        let e = parse_config(&MINIMAL.replace("fine_n = 16", "fine_n = 12")).unwrap_err();
        assert!(matches!(e, ConfigError::Invalid { ref key, .. } if key == "mesh.fine_n"));
    }

    #[test]
    fn mode_override_supplies_a_missing_mode() {
        let raw = RawConfig::parse("[adaptive]\nlevel0_n = 8\n[solver]\nnev = 1\n").unwrap();
        let cfg = raw.resolve(Some(Mode::AdaptiveLshape)).unwrap();
        assert_eq!(
            cfg.adaptive,
            Some(AdaptiveSpec {
                level0_n: 8,
                rounds: 12,
                fraction: 0.4
            })
        );
    }

    #[test]
    fn algebraic_and_batch_sections() {
        let text = "mode = algebraic\n[solver]\nnev = 4\nprecond_mode = B-A\n[batch]\nsizes = 2, 2\nshift_sign = minus\n\
                    [files]\nmatrix_a = a.mtx\nmatrix_b = b.mtx\nprolongation = p.mtx\n";
        let (cfg, _) = parse_config(text).unwrap();
        let files = cfg.files.unwrap();
        assert_eq!(files.matrix_a, PathBuf::from("a.mtx"));
        assert_eq!(files.coarse, None);
        let batch = cfg.pase.batch.unwrap();
        assert_eq!(batch.batch_sizes, vec![2, 2]);
        assert_eq!(batch.shift_sign, ShiftSign::Minus);
        assert_eq!(cfg.pase.precond_mode, PrecondMode::BA);
        let e = parse_config(&format!("{text}coarse_a = c.mtx\n")).unwrap_err();
        assert!(matches!(e, ConfigError::MissingKey { ref key, .. } if key == "files.coarse_b"));
    }

    #[test]
    fn batch_sizes_must_sum_to_nev() {
        let e = parse_config("mode = batch\n[mesh]\ncoarse_n = 4\nfine_n = 8\n[solver]\nnev = 4\n[batch]\nsizes = 2, 3\n")
            .unwrap_err();
        assert!(matches!(e, ConfigError::Invalid { .. }));
    }
}
