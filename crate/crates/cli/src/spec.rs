//! JSON spec files: named norm descriptors plus an optional task list.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer};

use regnorm::descriptor::{AggregationRule, NormDescriptor};
use regnorm::geometry::{Ellitope, Spectratope};
use regnorm::theta::{ThetaAggregator, ThetaForm};

use crate::CliError;

/// Embedded dense matrices must be strictly smaller than this in both dimensions.
pub const MAX_EMBEDDED_DIM: usize = 64;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecFile {
    pub norms: BTreeMap<String, DescriptorJson>,
    #[serde(default)]
    pub tasks: Vec<TaskJson>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskJson {
    pub op: String,
    pub target: String,
    #[serde(default)]
    pub params: serde_json::Map<String, serde_json::Value>,
}

/// `p` as a number or the string `"inf"`.
fn exponent<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Word(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Word(w) if matches!(w.as_str(), "inf" | "Inf" | "infinity") => Ok(f64::INFINITY),
        Raw::Word(w) => Err(serde::de::Error::custom(format!(
            "exponent must be a number or \"inf\", got {w:?}"
        ))),
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum MatrixJson {
    Dense(Vec<Vec<f64>>),
    Diag {
        diag: Vec<f64>,
    },
    /// Path to a row-major CSV file, relative to the spec file.
    Csv {
        csv: String,
    },
}

#[derive(Debug, Clone, Copy, Deserialize, Default, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum RuleJson {
    #[default]
    General,
    Absolute,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum ThetaJson {
    Lq {
        q: f64,
        #[serde(default)]
        arity: Option<usize>,
    },
    Linear {
        weights: Vec<f64>,
    },
    Max {
        #[serde(default)]
        arity: Option<usize>,
    },
    Nested {
        outer: Box<ThetaJson>,
        parts: Vec<ThetaJson>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum DescriptorJson {
    Lp {
        #[serde(deserialize_with = "exponent")]
        p: f64,
        n: usize,
    },
    Schatten {
        #[serde(deserialize_with = "exponent")]
        p: f64,
        m: usize,
        n: usize,
    },
    Pullback {
        #[serde(rename = "A")]
        a: MatrixJson,
        child: Box<DescriptorJson>,
    },
    Aggregate {
        theta: ThetaJson,
        children: Vec<DescriptorJson>,
        #[serde(default)]
        rule: RuleJson,
        #[serde(default)]
        p: Option<u32>,
    },
    Quotient {
        #[serde(rename = "P")]
        p: MatrixJson,
        child: Box<DescriptorJson>,
    },
    Ellitope {
        #[serde(rename = "T")]
        t: Vec<MatrixJson>,
        theta: ThetaJson,
        #[serde(rename = "P", default)]
        p: Option<MatrixJson>,
    },
    Spectratope {
        n: usize,
        #[serde(rename = "S")]
        s: Vec<Vec<MatrixJson>>,
        theta: ThetaJson,
        #[serde(rename = "P", default)]
        p: Option<MatrixJson>,
    },
}

/// A parsed spec file together with the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct Spec {
    pub file: SpecFile,
    pub base: PathBuf,
}

impl Spec {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let file: SpecFile = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Self { file, base })
    }

    pub fn raw(&self, name: &str) -> Result<&DescriptorJson, CliError> {
        self.file
            .norms
            .get(name)
            .ok_or_else(|| CliError::Validation(format!("no norm named {name:?} in spec")))
    }

    pub fn descriptor(&self, name: &str) -> Result<NormDescriptor, CliError> {
        let d = self.raw(name)?.build(&self.base)?;
        d.validate()?;
        Ok(d)
    }

    /// Builds and validates every descriptor and checks task targets.
    pub fn validate_all(&self) -> Result<(), CliError> {
        for name in self.file.norms.keys() {
            self.descriptor(name)
                .map_err(|e| e.context(&format!("norm {name:?}")))?;
        }
        for (i, t) in self.file.tasks.iter().enumerate() {
            self.raw(&t.target)
                .map_err(|e| e.context(&format!("task {i}")))?;
        }
        Ok(())
    }
}

pub fn read_csv_rows(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let bad = |e: String| CliError::Validation(format!("{}: {e}", path.display()));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| bad(format!("row {}: {f:?} is not a number", i + 1)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn dense(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, CliError> {
    let m = rows.len();
    let n = rows.first().map_or(0, Vec::len);
    if m == 0 || n == 0 {
        return Err(CliError::Validation(format!("{what}: empty matrix")));
    }
    if rows.iter().any(|r| r.len() != n) {
        return Err(CliError::Validation(format!("{what}: ragged rows")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CliError::Validation(format!("{what}: non-finite entry")));
    }
    Ok(DMatrix::from_fn(m, n, |i, j| rows[i][j]))
}

impl MatrixJson {
    pub fn build(&self, base: &Path) -> Result<DMatrix<f64>, CliError> {
        match self {
            MatrixJson::Dense(rows) => {
                let m = dense(rows, "embedded matrix")?;
                if m.nrows() >= MAX_EMBEDDED_DIM || m.ncols() >= MAX_EMBEDDED_DIM {
                    return Err(CliError::Validation(format!(
                        "embedded matrix is {}x{}; matrices of {MAX_EMBEDDED_DIM} rows or columns must be given as a csv file",
                        m.nrows(),
                        m.ncols()
                    )));
                }
                Ok(m)
            }
            MatrixJson::Diag { diag } => {
                if diag.is_empty() || diag.iter().any(|v| !v.is_finite()) {
                    return Err(CliError::Validation(
                        "diag must be a non-empty list of finite numbers".into(),
                    ));
                }
                Ok(DMatrix::from_diagonal(
                    &nalgebra::DVector::from_column_slice(diag),
                ))
            }
            MatrixJson::Csv { csv } => {
                let path = base.join(csv);
                dense(&read_csv_rows(&path)?, &path.display().to_string())
            }
        }
    }
}

impl ThetaJson {
    /// Arity implied by the JSON alone, if any.
    fn declared_arity(&self) -> Option<usize> {
        match self {
            ThetaJson::Lq { arity, .. } | ThetaJson::Max { arity } => *arity,
            ThetaJson::Linear { weights } => Some(weights.len()),
            ThetaJson::Nested { parts, .. } => parts
                .iter()
                .map(ThetaJson::declared_arity)
                .sum::<Option<usize>>(),
        }
    }

    pub fn form(&self, arity: usize) -> Result<ThetaForm, CliError> {
        if let Some(a) = self.declared_arity() {
            if a != arity {
                return Err(CliError::Validation(format!(
                    "aggregator declares arity {a}, context needs {arity}"
                )));
            }
        }
        Ok(match self {
            ThetaJson::Lq { q, .. } => ThetaForm::Lq { q: *q, arity },
            ThetaJson::Linear { weights } => ThetaForm::Linear {
                weights: weights.clone(),
            },
            ThetaJson::Max { .. } => ThetaForm::Max { arity },
            ThetaJson::Nested { outer, parts } => {
                let parts = parts
                    .iter()
                    .map(|p| {
                        let a = p.declared_arity().ok_or_else(|| {
                            CliError::Validation(
                                "every part of a nested aggregator must declare its arity".into(),
                            )
                        })?;
                        p.form(a)
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                ThetaForm::Nested {
                    outer: Box::new(outer.form(parts.len())?),
                    parts,
                }
            }
        })
    }

    pub fn build(&self, arity: usize) -> Result<ThetaAggregator, CliError> {
        Ok(ThetaAggregator::new(self.form(arity)?)?)
    }
}

impl DescriptorJson {
    pub fn build(&self, base: &Path) -> Result<NormDescriptor, CliError> {
        Ok(match self {
            DescriptorJson::Lp { p, n } => NormDescriptor::Lp { p: *p, n: *n },
            DescriptorJson::Schatten { p, m, n } => NormDescriptor::Schatten {
                p: *p,
                m: *m,
                n: *n,
            },
            DescriptorJson::Pullback { a, child } => NormDescriptor::Pullback {
                a: a.build(base)?,
                child: Box::new(child.build(base)?),
            },
            DescriptorJson::Aggregate {
                theta,
                children,
                rule,
                p,
            } => {
                let rule = match (rule, p) {
                    (RuleJson::General, p) => AggregationRule::General { p: *p },
                    (RuleJson::Absolute, None) => AggregationRule::Absolute,
                    (RuleJson::Absolute, Some(_)) => {
                        return Err(CliError::Validation(
                            "exponent p applies to the general rule only".into(),
                        ))
                    }
                };
                NormDescriptor::Aggregate {
                    theta: theta.build(children.len())?,
                    children: children
                        .iter()
                        .map(|c| c.build(base))
                        .collect::<Result<_, _>>()?,
                    rule,
                }
            }
            DescriptorJson::Quotient { p, child } => NormDescriptor::Quotient {
                p: p.build(base)?,
                child: Box::new(child.build(base)?),
            },
            DescriptorJson::Ellitope { t, theta, p } => {
                let t = t
                    .iter()
                    .map(|m| m.build(base))
                    .collect::<Result<Vec<_>, _>>()?;
                let theta = theta.build(t.len())?;
                let p = p.as_ref().map(|m| m.build(base)).transpose()?;
                NormDescriptor::Ellitope(Ellitope::new(t, theta, p)?)
            }
            DescriptorJson::Spectratope { n, s, theta, p } => {
                let maps = s
                    .iter()
                    .map(|row| row.iter().map(|m| m.build(base)).collect())
                    .collect::<Result<Vec<Vec<_>>, _>>()?;
                let theta = theta.build(maps.len())?;
                let p = p.as_ref().map(|m| m.build(base)).transpose()?;
                NormDescriptor::Spectratope(Spectratope::new(*n, maps, theta, p)?)
            }
        })
    }

    /// Same descriptor on `ℝⁿ`, for dimension sweeps. Only `ℓ_p` can be resized.
    pub fn with_dim(&self, n: usize) -> Option<DescriptorJson> {
        match self {
            DescriptorJson::Lp { p, .. } => Some(DescriptorJson::Lp { p: *p, n }),
            _ => None,
        }
    }
}
