//! Sectioned key-value config: parsing, canonical reprint, and translation
//! into the core library's declarations.
//!
//! The surface grammar is line-oriented (see `docs/config.md`): `[section]`
//! headers, `key = value` entries with repeatable keys, `#` comments.
//! Canonicalization merges duplicate sections, trims keys, and collapses
//! whitespace runs inside values, so the config hash is stable under any
//! whitespace-only edit and reprint-then-parse is idempotent.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use thiserror::Error;

use liouville_core::expr::{parse_expr_with, Expr, IrrationalBasis, ParseError};
use liouville_core::geometry::{
    PoissonBivector, Structure, Structure2Form, TensorField, VectorFieldExpr,
};
use liouville_core::numberfield::NumberField;
use liouville_core::series::FormalSeries;
use liouville_core::torus::{SystemSpec, Tolerances};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("[{section}] {key}: {message}")]
    Value {
        section: String,
        key: String,
        message: String,
    },
    #[error("[{section}] {key} (line {line}) at byte {offset}: {source}")]
    Expression {
        section: String,
        key: String,
        line: usize,
        /// Byte offset of the failing token within the canonical config.
        offset: usize,
        source: ParseError,
    },
    #[error("missing required key [{section}] {key}")]
    Missing { section: String, key: String },
    #[error("system declaration: {0}")]
    System(String),
}

// ---------------------------------------------------------------------------
// Raw sectioned key-value layer.

#[derive(Clone, Debug)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Clone, Debug)]
pub struct Section {
    pub name: String,
    pub entries: Vec<Entry>,
}

#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    pub sections: Vec<Section>,
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<RawConfig, ConfigError> {
        let mut sections: Vec<Section> = Vec::new();
        let mut current: Option<usize> = None;
        for (idx, raw_line) in text.lines().enumerate() {
            let line = idx + 1;
            let content = match raw_line.find('#') {
                Some(pos) => &raw_line[..pos],
                None => raw_line,
            };
            let trimmed = content.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(name) = trimmed.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or(ConfigError::Syntax {
                    line,
                    message: "unterminated section header".into(),
                })?;
                let name = name.trim().to_string();
                if name.is_empty() {
                    return Err(ConfigError::Syntax {
                        line,
                        message: "empty section name".into(),
                    });
                }
                // Duplicate headers extend the earlier section.
                current = Some(
                    sections
                        .iter()
                        .position(|s| s.name == name)
                        .unwrap_or_else(|| {
                            sections.push(Section {
                                name: name.clone(),
                                entries: Vec::new(),
                            });
                            sections.len() - 1
                        }),
                );
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    message: format!("expected `key = value`, got `{trimmed}`"),
                });
            };
            let Some(section) = current else {
                return Err(ConfigError::Syntax {
                    line,
                    message: "entry before any [section] header".into(),
                });
            };
            sections[section].entries.push(Entry {
                key: key.trim().to_string(),
                value: collapse_ws(value),
                line,
            });
        }
        Ok(RawConfig { sections })
    }

    /// Canonical reprint: merged sections in first-appearance order, one
    /// entry per line, single spaces. Parsing the reprint reproduces the
    /// same structure, and the report's config hash is taken over it.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for s in &self.sections {
            out.push('[');
            out.push_str(&s.name);
            out.push_str("]\n");
            for e in &s.entries {
                out.push_str(&e.key);
                out.push_str(" = ");
                out.push_str(&e.value);
                out.push('\n');
            }
        }
        out
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&Entry> {
        self.section(section)?
            .entries
            .iter()
            .rev()
            .find(|e| e.key == key)
    }

    pub fn get_all(&self, section: &str, key: &str) -> Vec<&Entry> {
        self.section(section)
            .map(|s| s.entries.iter().filter(|e| e.key == key).collect())
            .unwrap_or_default()
    }

    /// Byte offset of an entry's value within the canonical reprint, for
    /// expression diagnostics.
    pub fn value_offset(&self, section: &str, entry: &Entry) -> usize {
        let mut offset = 0usize;
        for s in &self.sections {
            offset += s.name.len() + 3;
            for e in &s.entries {
                if s.name == section && std::ptr::eq(e, entry) {
                    return offset + e.key.len() + 3;
                }
                offset += e.key.len() + 3 + e.value.len() + 1;
            }
        }
        offset
    }
}

// ---------------------------------------------------------------------------
// Typed views.

fn bad(section: &str, key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Value {
        section: section.into(),
        key: key.into(),
        message: message.into(),
    }
}

fn parse_f64(section: &str, key: &str, s: &str) -> Result<f64, ConfigError> {
    s.parse::<f64>()
        .map_err(|_| bad(section, key, format!("`{s}` is not a number")))
}

fn parse_usize(section: &str, key: &str, s: &str) -> Result<usize, ConfigError> {
    s.parse::<usize>()
        .map_err(|_| bad(section, key, format!("`{s}` is not a non-negative integer")))
}

fn parse_f64_list(section: &str, key: &str, s: &str) -> Result<Vec<f64>, ConfigError> {
    s.split_whitespace()
        .map(|t| parse_f64(section, key, t))
        .collect()
}

fn parse_rational(section: &str, key: &str, s: &str) -> Result<BigRational, ConfigError> {
    let parse_int = |t: &str| -> Result<BigInt, ConfigError> {
        t.parse::<BigInt>()
            .map_err(|_| bad(section, key, format!("`{t}` is not an integer")))
    };
    match s.split_once('/') {
        Some((n, d)) => {
            let den = parse_int(d.trim())?;
            if den == BigInt::from(0) {
                return Err(bad(section, key, "zero denominator"));
            }
            Ok(BigRational::new(parse_int(n.trim())?, den))
        }
        None => Ok(BigRational::from_integer(parse_int(s.trim())?)),
    }
}

/// Numbered tolerance table: module tolerances plus acceptance gates, all
/// addressable by `--tol KEY=VAL` and the `[tolerances]` section.
#[derive(Clone, Debug)]
pub struct Gates {
    pub isotropy: f64,
    pub quasiperiodicity: f64,
    pub nf_residual: f64,
    pub unimodular: f64,
}

impl Default for Gates {
    fn default() -> Self {
        Gates {
            isotropy: 1e-7,
            quasiperiodicity: 1e-6,
            nf_residual: 1e-5,
            unimodular: 1e-6,
        }
    }
}

pub fn apply_tolerance(
    tols: &mut Tolerances,
    gates: &mut Gates,
    key: &str,
    value: f64,
) -> Result<(), ConfigError> {
    match key {
        "commute" => tols.tol_commute = value,
        "firstint" => tols.tol_firstint = value,
        "return" => tols.tol_return = value,
        "horizon_periods" => tols.horizon_periods = value,
        "ode_rtol" => tols.ode.rtol = value,
        "ode_atol" => tols.ode.atol = value,
        "isotropy" => gates.isotropy = value,
        "quasiperiodicity" => gates.quasiperiodicity = value,
        "nf_residual" => gates.nf_residual = value,
        "unimodular" => gates.unimodular = value,
        other => {
            return Err(bad(
                "tolerances",
                other,
                "unknown tolerance; known: commute, firstint, return, horizon_periods, \
                 ode_rtol, ode_atol, isotropy, quasiperiodicity, nf_residual, unimodular",
            ))
        }
    }
    Ok(())
}

/// A conservation-check input with its declared expectation.
pub struct TensorDecl {
    pub label: String,
    pub tensor: TensorField,
}

pub struct ConservationCfg {
    pub grid: usize,
    /// Constant-expression weights of `Σ c_i X_i` for the single-generator
    /// hypothesis; `None` means average against every declared field.
    pub combination: Option<Vec<Expr>>,
    pub tensors: Vec<TensorDecl>,
    pub rejects: Vec<TensorDecl>,
}

pub struct ActionsCfg {
    pub alpha: Vec<Expr>,
    pub family_directions: Vec<Vec<f64>>,
    pub family_step: f64,
    pub normal_form_mode: Option<String>,
    pub grid: usize,
    pub leafwise_cycle: Option<usize>,
    pub coaffine_base_dim: Option<usize>,
}

pub struct ChartCfg {
    pub rotations: Vec<Vec<f64>>,
    pub samples_grid: usize,
    pub isotropy_samples: usize,
}

/// Exact input to the normal-form engine: a number field, either a vector
/// field / Hamiltonian given term-by-term or a bare eigenvalue list.
pub struct NormalFormCfg {
    pub field: NumberField,
    pub mode: String,
    pub vars: usize,
    pub maxdeg: usize,
    /// Explicit override; defaults to `maxdeg` (after flag overrides).
    pub resonance_maxdeg: Option<usize>,
    /// Vector-field mode: per-component series; Hamiltonian mode: one.
    pub series: Vec<FormalSeries>,
    pub gamma_texts: Vec<String>,
}

pub struct ClassifyCfg {
    pub hamiltonian: Option<FormalSeries>,
    pub field: NumberField,
    pub gamma_texts: Vec<String>,
}

pub struct AnalysisConfig {
    pub canonical: String,
    pub system: SystemSpec,
    pub coords: Vec<String>,
    pub seeds: Vec<Vec<f64>>,
    pub tols: Tolerances,
    pub gates: Gates,
    pub analyses: Vec<String>,
    pub chart: ChartCfg,
    pub actions: Option<ActionsCfg>,
    pub conservation: Option<ConservationCfg>,
    pub normalform: Option<NormalFormCfg>,
    pub classify: Option<ClassifyCfg>,
}

fn parse_expr_entry(
    raw: &RawConfig,
    section: &str,
    entry: &Entry,
    source: &str,
    base_offset_in_value: usize,
    vars: &[String],
    consts: &[String],
) -> Result<Expr, ConfigError> {
    parse_expr_with(source, vars, consts).map_err(|e| {
        let inner = match &e {
            ParseError::Syntax { offset, .. }
            | ParseError::UnknownIdentifier { offset, .. }
            | ParseError::NonIntegerExponent { offset } => *offset,
        };
        ConfigError::Expression {
            section: section.into(),
            key: entry.key.clone(),
            line: entry.line,
            offset: raw.value_offset(section, entry) + base_offset_in_value + inner,
            source: e,
        }
    })
}

fn split_commas(s: &str) -> Vec<(usize, &str)> {
    // Comma-separated pieces with their byte offsets, commas never nest in
    // this grammar (expressions use no commas).
    let mut out = Vec::new();
    let mut start = 0usize;
    for (i, c) in s.char_indices() {
        if c == ',' {
            out.push((start, &s[start..i]));
            start = i + 1;
        }
    }
    out.push((start, &s[start..]));
    out
}

fn build_structure(
    raw: &RawConfig,
    vars: &[String],
    consts: &[String],
) -> Result<Option<Structure>, ConfigError> {
    const S: &str = "system";
    let Some(entry) = raw.get(S, "structure") else {
        return Ok(None);
    };
    let value = entry.value.as_str();
    let mut words = value.split_whitespace();
    let kind = words.next().unwrap_or_default();
    let dim = vars.len();
    let parse_pairs = |rest: &str| -> Result<Vec<(usize, usize)>, ConfigError> {
        let mut pairs = Vec::new();
        for piece in rest.split(',') {
            let idx: Vec<usize> = piece
                .split_whitespace()
                .map(|t| parse_usize(S, "structure", t))
                .collect::<Result<_, _>>()?;
            if idx.len() != 2 || idx[0] >= dim || idx[1] >= dim {
                return Err(bad(S, "structure", format!("bad index pair `{piece}`")));
            }
            pairs.push((idx[0], idx[1]));
        }
        Ok(pairs)
    };
    let entries_from = |key: &str| -> Result<Vec<(usize, usize, Expr)>, ConfigError> {
        let mut entries = Vec::new();
        for e in raw.get_all(S, key) {
            let mut parts = e.value.splitn(3, ' ');
            let (a, b, expr_src) = match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), Some(src)) => (a, b, src),
                _ => {
                    return Err(bad(S, key, format!("expected `i j expression`, got `{}`", e.value)))
                }
            };
            let a = parse_usize(S, key, a)?;
            let b = parse_usize(S, key, b)?;
            let offset = e.value.len() - expr_src.len();
            let expr = parse_expr_entry(raw, S, e, expr_src, offset, vars, consts)?;
            entries.push((a, b, expr));
        }
        Ok(entries)
    };
    let rest = value[kind.len()..].trim();
    let structure = match kind {
        "pairs" => Structure::Form(
            Structure2Form::canonical_pairs(dim, &parse_pairs(rest)?)
                .map_err(|e| bad(S, "structure", e.to_string()))?,
        ),
        "poisson_pairs" => Structure::Poisson(
            PoissonBivector::canonical_pairs(dim, &parse_pairs(rest)?)
                .map_err(|e| bad(S, "structure", e.to_string()))?,
        ),
        "form" => Structure::Form(
            Structure2Form::from_entries(dim, entries_from("form_entry")?)
                .map_err(|e| bad(S, "form_entry", e.to_string()))?,
        ),
        "poisson" => Structure::Poisson(
            PoissonBivector::from_entries(dim, entries_from("poisson_entry")?)
                .map_err(|e| bad(S, "poisson_entry", e.to_string()))?,
        ),
        other => {
            return Err(bad(
                S,
                "structure",
                format!("unknown structure kind `{other}`; known: pairs, poisson_pairs, form, poisson"),
            ))
        }
    };
    Ok(Some(structure))
}

fn build_tensor(
    raw: &RawConfig,
    entry: &Entry,
    key: &str,
    vars: &[String],
    consts: &[String],
) -> Result<TensorDecl, ConfigError> {
    const S: &str = "conservation";
    let value = entry.value.as_str();
    let mut parts = value.splitn(3, ':');
    let label = parts
        .next()
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| bad(S, key, "missing label"))?
        .to_string();
    let kind = parts
        .next()
        .map(str::trim)
        .ok_or_else(|| bad(S, key, "expected `label : kind : components`"))?;
    let dim = vars.len();
    let rest = parts.next().unwrap_or("").trim();
    let rest_offset = value.len() - rest.len();
    let comps_of = |src: &str, off: usize| -> Result<Vec<Expr>, ConfigError> {
        split_commas(src)
            .into_iter()
            .map(|(o, piece)| parse_expr_entry(raw, S, entry, piece, off + o, vars, consts))
            .collect()
    };
    let tensor = match kind {
        "vector" => {
            let comps = comps_of(rest, rest_offset)?;
            if comps.len() != dim {
                return Err(bad(S, key, format!("{label}: need {dim} components")));
            }
            TensorField::from_vector(&VectorFieldExpr::new(comps))
        }
        "one_form" => {
            let comps = comps_of(rest, rest_offset)?;
            TensorField::from_one_form(dim, comps)
                .map_err(|e| bad(S, key, format!("{label}: {e}")))?
        }
        "two_form" => {
            let mut entries = Vec::new();
            for (off, piece) in rest.split(';').scan(0usize, |acc, piece| {
                let off = *acc;
                *acc += piece.len() + 1;
                Some((off, piece))
            }) {
                let mut words = piece.trim().splitn(3, ' ');
                let (a, b, src) = match (words.next(), words.next(), words.next()) {
                    (Some(a), Some(b), Some(src)) => (a, b, src),
                    _ => return Err(bad(S, key, format!("{label}: expected `i j expr` in `{piece}`"))),
                };
                let a = parse_usize(S, key, a)?;
                let b = parse_usize(S, key, b)?;
                let inner = piece.len() - src.len();
                entries.push((
                    a,
                    b,
                    parse_expr_entry(raw, S, entry, src, rest_offset + off + inner, vars, consts)?,
                ));
            }
            TensorField::from_two_form(
                &Structure2Form::from_entries(dim, entries)
                    .map_err(|e| bad(S, key, format!("{label}: {e}")))?,
            )
        }
        "volume" => {
            let coords: Vec<Vec<Expr>> = (0..dim)
                .map(|a| {
                    (0..dim)
                        .map(|b| Expr::num_int(i64::from(a == b)))
                        .collect()
                })
                .collect();
            TensorField::wedge_of_one_forms(dim, &coords)
        }
        other if other.starts_with("tensor") => {
            let shape: Vec<usize> = other
                .split_whitespace()
                .skip(1)
                .map(|t| parse_usize(S, key, t))
                .collect::<Result<_, _>>()?;
            let [contra, cov] = shape[..] else {
                return Err(bad(S, key, format!("{label}: expected `tensor C V`")));
            };
            let comps = comps_of(rest, rest_offset)?;
            TensorField::from_components(dim, contra, cov, comps)
                .map_err(|e| bad(S, key, format!("{label}: {e}")))?
        }
        other => {
            return Err(bad(
                S,
                key,
                format!("{label}: unknown tensor kind `{other}`; known: vector, one_form, two_form, volume, tensor C V"),
            ))
        }
    };
    Ok(TensorDecl { label, tensor })
}

fn build_number_field(raw: &RawConfig, section: &str) -> Result<NumberField, ConfigError> {
    let mut field = NumberField::rationals();
    if let Some(e) = raw.get(section, "adjoin") {
        let words: Vec<&str> = e.value.split_whitespace().collect();
        let [name, square, approx] = words[..] else {
            return Err(bad(section, "adjoin", "expected `name square approx`"));
        };
        let square = parse_rational(section, "adjoin", square)?;
        let approx = parse_f64(section, "adjoin", approx)?;
        field = NumberField::adjoin_sqrt(name, square, approx)
            .map_err(|err| bad(section, "adjoin", err.to_string()))?;
    }
    let complexify = raw
        .get(section, "complexify")
        .map(|e| e.value == "true" || e.value == "1")
        .unwrap_or(false);
    if complexify {
        field = if field.dim() == 1 {
            NumberField::gaussian()
        } else {
            field.complexified()
        };
    }
    Ok(field)
}

fn parse_series_terms(
    raw: &RawConfig,
    section: &str,
    field: &NumberField,
    vars: usize,
    maxdeg: usize,
    with_component: bool,
    n_components: usize,
) -> Result<Vec<FormalSeries>, ConfigError> {
    let mut series = vec![FormalSeries::zero(vars, maxdeg); n_components];
    for e in raw.get_all(section, "term") {
        let pieces: Vec<&str> = e.value.split(':').map(str::trim).collect();
        let (component, exps_src, coeff_src) = if with_component {
            let [c, k, v] = pieces[..] else {
                return Err(bad(section, "term", "expected `component : exponents : coefficient`"));
            };
            (parse_usize(section, "term", c)?, k, v)
        } else {
            let [k, v] = pieces[..] else {
                return Err(bad(section, "term", "expected `exponents : coefficient`"));
            };
            (0, k, v)
        };
        if component >= n_components {
            return Err(bad(
                section,
                "term",
                format!("component {component} out of range (< {n_components})"),
            ));
        }
        let k: Vec<u32> = exps_src
            .split_whitespace()
            .map(|t| {
                t.parse::<u32>()
                    .map_err(|_| bad(section, "term", format!("bad exponent `{t}`")))
            })
            .collect::<Result<_, _>>()?;
        if k.len() != vars {
            return Err(bad(
                section,
                "term",
                format!("exponent vector has {} entries, need {vars}", k.len()),
            ));
        }
        let degree: u32 = k.iter().sum();
        if degree as usize > maxdeg {
            return Err(bad(
                section,
                "term",
                format!("term degree {degree} exceeds maxdeg {maxdeg}"),
            ));
        }
        let coeff = field
            .parse(coeff_src)
            .map_err(|err| bad(section, "term", err.to_string()))?;
        series[component]
            .add_term(&k, coeff)
            .map_err(|err| bad(section, "term", err.to_string()))?;
    }
    Ok(series)
}

fn comma_list(s: &str) -> Vec<String> {
    split_commas(s)
        .into_iter()
        .map(|(_, piece)| piece.trim().to_string())
        .filter(|p| !p.is_empty())
        .collect()
}

impl AnalysisConfig {
    pub fn from_text(text: &str) -> Result<AnalysisConfig, ConfigError> {
        let raw = RawConfig::parse(text)?;
        let canonical = raw.canonical();
        const S: &str = "system";

        let coords_entry = raw.get(S, "coords").ok_or(ConfigError::Missing {
            section: S.into(),
            key: "coords".into(),
        })?;
        let coords: Vec<String> = coords_entry
            .value
            .split_whitespace()
            .map(str::to_string)
            .collect();
        let dim = coords.len();

        let mut basis = IrrationalBasis::empty();
        let mut consts: Vec<String> = Vec::new();
        for e in raw.get_all(S, "irrational") {
            let words: Vec<&str> = e.value.split_whitespace().collect();
            let [name, decimal] = words[..] else {
                return Err(bad(S, "irrational", "expected `name decimal`"));
            };
            basis
                .declare(name, decimal)
                .map_err(|err| bad(S, "irrational", err.to_string()))?;
            consts.push(name.to_string());
        }

        let mut fields = Vec::new();
        for e in raw.get_all(S, "field") {
            let comps: Vec<Expr> = split_commas(&e.value)
                .into_iter()
                .map(|(off, piece)| parse_expr_entry(&raw, S, e, piece, off, &coords, &consts))
                .collect::<Result<_, _>>()?;
            if comps.len() != dim {
                return Err(bad(
                    S,
                    "field",
                    format!("{} components, need {dim}", comps.len()),
                ));
            }
            fields.push(VectorFieldExpr::new(comps));
        }
        let mut integrals = Vec::new();
        for e in raw.get_all(S, "integral") {
            integrals.push(parse_expr_entry(&raw, S, e, &e.value, 0, &coords, &consts)?);
        }
        let mut hamiltonians = Vec::new();
        for e in raw.get_all(S, "hamiltonian") {
            hamiltonians.push(parse_expr_entry(&raw, S, e, &e.value, 0, &coords, &consts)?);
        }
        if fields.is_empty() {
            return Err(ConfigError::Missing {
                section: S.into(),
                key: "field".into(),
            });
        }

        let mut system = SystemSpec::new(dim, fields, integrals, basis)
            .map_err(|e| ConfigError::System(e.to_string()))?;
        if !hamiltonians.is_empty() {
            system = system
                .with_hamiltonians(hamiltonians)
                .map_err(|e| ConfigError::System(e.to_string()))?;
        }
        if let Some(structure) = build_structure(&raw, &coords, &consts)? {
            system = system.with_structure(structure);
        }

        let mut seeds = Vec::new();
        for e in raw.get_all("seeds", "point") {
            let point = parse_f64_list("seeds", "point", &e.value)?;
            if point.len() != dim {
                return Err(bad(
                    "seeds",
                    "point",
                    format!("{} coordinates, need {dim}", point.len()),
                ));
            }
            seeds.push(point);
        }

        let mut tols = Tolerances::default();
        let mut gates = Gates::default();
        if let Some(sec) = raw.section("tolerances") {
            for e in &sec.entries {
                let v = parse_f64("tolerances", &e.key, &e.value)?;
                apply_tolerance(&mut tols, &mut gates, &e.key, v)?;
            }
        }

        let analyses = raw
            .get("analyses", "run")
            .map(|e| {
                e.value
                    .split_whitespace()
                    .map(str::to_string)
                    .collect::<Vec<_>>()
            })
            .unwrap_or_default();

        let chart = ChartCfg {
            rotations: raw
                .get_all("chart", "rotation")
                .into_iter()
                .map(|e| parse_f64_list("chart", "rotation", &e.value))
                .collect::<Result<_, _>>()?,
            samples_grid: match raw.get("chart", "samples_grid") {
                Some(e) => parse_usize("chart", "samples_grid", &e.value)?,
                None => 8,
            },
            isotropy_samples: match raw.get("chart", "isotropy_samples") {
                Some(e) => parse_usize("chart", "isotropy_samples", &e.value)?,
                None => 1000,
            },
        };

        let actions = match raw.section("actions") {
            None => None,
            Some(_) => {
                const A: &str = "actions";
                let alpha_entry = raw.get(A, "alpha").ok_or(ConfigError::Missing {
                    section: A.into(),
                    key: "alpha".into(),
                })?;
                let alpha: Vec<Expr> = split_commas(&alpha_entry.value)
                    .into_iter()
                    .map(|(off, piece)| {
                        parse_expr_entry(&raw, A, alpha_entry, piece, off, &coords, &consts)
                    })
                    .collect::<Result<_, _>>()?;
                if alpha.len() != dim {
                    return Err(bad(A, "alpha", format!("{} components, need {dim}", alpha.len())));
                }
                Some(ActionsCfg {
                    alpha,
                    family_directions: raw
                        .get_all(A, "family_direction")
                        .into_iter()
                        .map(|e| parse_f64_list(A, "family_direction", &e.value))
                        .collect::<Result<_, _>>()?,
                    family_step: match raw.get(A, "family_step") {
                        Some(e) => parse_f64(A, "family_step", &e.value)?,
                        None => 0.01,
                    },
                    normal_form_mode: raw.get(A, "normal_form").map(|e| e.value.clone()),
                    grid: match raw.get(A, "grid") {
                        Some(e) => parse_usize(A, "grid", &e.value)?,
                        None => 12,
                    },
                    leafwise_cycle: match raw.get(A, "leafwise_cycle") {
                        Some(e) => Some(parse_usize(A, "leafwise_cycle", &e.value)?),
                        None => None,
                    },
                    coaffine_base_dim: match raw.get(A, "coaffine_base_dim") {
                        Some(e) => Some(parse_usize(A, "coaffine_base_dim", &e.value)?),
                        None => None,
                    },
                })
            }
        };

        let conservation = match raw.section("conservation") {
            None => None,
            Some(_) => {
                const C: &str = "conservation";
                let mut tensors = Vec::new();
                for e in raw.get_all(C, "tensor") {
                    tensors.push(build_tensor(&raw, e, "tensor", &coords, &consts)?);
                }
                let mut rejects = Vec::new();
                for e in raw.get_all(C, "reject") {
                    rejects.push(build_tensor(&raw, e, "reject", &coords, &consts)?);
                }
                Some(ConservationCfg {
                    grid: match raw.get(C, "grid") {
                        Some(e) => parse_usize(C, "grid", &e.value)?,
                        None => 16,
                    },
                    combination: match raw.get(C, "combination") {
                        Some(e) => Some(
                            split_commas(&e.value)
                                .into_iter()
                                .map(|(off, piece)| {
                                    parse_expr_entry(&raw, C, e, piece, off, &coords, &consts)
                                })
                                .collect::<Result<_, _>>()?,
                        ),
                        None => None,
                    },
                    tensors,
                    rejects,
                })
            }
        };

        let normalform = match raw.section("normalform") {
            None => None,
            Some(_) => {
                const N: &str = "normalform";
                let field = build_number_field(&raw, N)?;
                let mode = raw
                    .get(N, "mode")
                    .map(|e| e.value.clone())
                    .unwrap_or_else(|| "vectorfield".into());
                let vars = match raw.get(N, "vars") {
                    Some(e) => parse_usize(N, "vars", &e.value)?,
                    None => 0,
                };
                let maxdeg = match raw.get(N, "maxdeg") {
                    Some(e) => parse_usize(N, "maxdeg", &e.value)?,
                    None => 6,
                };
                let resonance_maxdeg = match raw.get(N, "resonance_maxdeg") {
                    Some(e) => Some(parse_usize(N, "resonance_maxdeg", &e.value)?),
                    None => None,
                };
                let gamma_texts = raw
                    .get(N, "gamma")
                    .map(|e| comma_list(&e.value))
                    .unwrap_or_default();
                let has_terms = !raw.get_all(N, "term").is_empty();
                if has_terms && vars == 0 {
                    return Err(ConfigError::Missing {
                        section: N.into(),
                        key: "vars".into(),
                    });
                }
                let series = if has_terms {
                    let with_component = mode == "vectorfield";
                    let n_components = if with_component { vars } else { 1 };
                    parse_series_terms(&raw, N, &field, vars, maxdeg, with_component, n_components)?
                } else {
                    Vec::new()
                };
                Some(NormalFormCfg {
                    field,
                    mode,
                    vars,
                    maxdeg,
                    resonance_maxdeg,
                    series,
                    gamma_texts,
                })
            }
        };

        let classify = match raw.section("classify") {
            None => None,
            Some(_) => {
                const C: &str = "classify";
                let field = build_number_field(&raw, C)?;
                let vars = match raw.get(C, "vars") {
                    Some(e) => parse_usize(C, "vars", &e.value)?,
                    None => 0,
                };
                let has_terms = !raw.get_all(C, "term").is_empty();
                let hamiltonian = if has_terms {
                    if vars == 0 {
                        return Err(ConfigError::Missing {
                            section: C.into(),
                            key: "vars".into(),
                        });
                    }
                    let rationals = NumberField::rationals();
                    Some(
                        parse_series_terms(&raw, C, &rationals, vars, 2, false, 1)?
                            .pop()
                            .expect("one series"),
                    )
                } else {
                    None
                };
                Some(ClassifyCfg {
                    hamiltonian,
                    field,
                    gamma_texts: raw
                        .get(C, "gamma")
                        .map(|e| comma_list(&e.value))
                        .unwrap_or_default(),
                })
            }
        };

        Ok(AnalysisConfig {
            canonical,
            system,
            coords,
            seeds,
            tols,
            gates,
            analyses,
            chart,
            actions,
            conservation,
            normalform,
            classify,
        })
    }

    /// Blocks `analyze` should run: the `[analyses] run` list, or inferred
    /// from which sections are present.
    pub fn requested_analyses(&self) -> Vec<String> {
        if !self.analyses.is_empty() {
            return self.analyses.clone();
        }
        let mut out = vec!["chart".to_string()];
        if self.actions.is_some() {
            out.push("actions".into());
        }
        if self.conservation.is_some() {
            out.push("conservation".into());
        }
        if self.normalform.is_some() {
            out.push("normalform".into());
        }
        if self.classify.is_some() {
            out.push("classify".into());
        }
        out
    }
}

/// Parsed `--tol KEY=VAL` override.
pub fn parse_tol_flag(s: &str) -> Result<(String, f64), String> {
    let (key, val) = s
        .split_once('=')
        .ok_or_else(|| format!("`{s}` is not KEY=VAL"))?;
    let v: f64 = val
        .trim()
        .parse()
        .map_err(|_| format!("`{val}` is not a number"))?;
    Ok((key.trim().to_string(), v))
}

/// Small deterministic map used for the envelope's tolerance echo.
pub fn tolerance_echo(tols: &Tolerances, gates: &Gates) -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("commute".into(), tols.tol_commute),
        ("firstint".into(), tols.tol_firstint),
        ("return".into(), tols.tol_return),
        ("horizon_periods".into(), tols.horizon_periods),
        ("ode_rtol".into(), tols.ode.rtol),
        ("ode_atol".into(), tols.ode.atol),
        ("isotropy".into(), gates.isotropy),
        ("quasiperiodicity".into(), gates.quasiperiodicity),
        ("nf_residual".into(), gates.nf_residual),
        ("unimodular".into(), gates.unimodular),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    const OSC: &str = "\
# oscillator pair, frequencies 1 and sqrt(2)
[system]
coords = x1 y1 x2 y2
irrational = s2 1.4142135623730951
field = -y1, x1, 0, 0
field = 0, 0, -s2*y2, s2*x2
integral = (x1^2 + y1^2)/2
integral = (x2^2 + y2^2)/2
structure = pairs 0 1, 2 3

[seeds]
point = 1 0 1 0

[actions]
alpha = 0, x1, 0, x2
";

    #[test]
    fn reprint_then_parse_is_idempotent() {
        let raw = RawConfig::parse(OSC).unwrap();
        let once = raw.canonical();
        let twice = RawConfig::parse(&once).unwrap().canonical();
        assert_eq!(once, twice);
    }

    #[test]
    fn whitespace_only_edits_keep_the_canonical_text() {
        let messy = OSC
            .replace(" = ", "   =\t ")
            .replace("\n[seeds]", "\n\n# stray comment\n[seeds]");
        let a = RawConfig::parse(OSC).unwrap().canonical();
        let b = RawConfig::parse(&messy).unwrap().canonical();
        assert_eq!(a, b);
    }

    #[test]
    fn duplicate_section_headers_merge() {
        let split = format!("{OSC}\n[system]\nhamiltonian = (x1^2 + y1^2)/2\n");
        let raw = RawConfig::parse(&split).unwrap();
        assert_eq!(raw.sections.iter().filter(|s| s.name == "system").count(), 1);
        assert!(raw.get("system", "hamiltonian").is_some());
    }

    #[test]
    fn typed_config_carries_counts_and_defaults() {
        let cfg = AnalysisConfig::from_text(OSC).unwrap();
        assert_eq!(cfg.coords.len(), 4);
        assert_eq!(cfg.system.fields.len(), 2);
        assert_eq!(cfg.system.integrals.len(), 2);
        assert_eq!(cfg.seeds, vec![vec![1.0, 0.0, 1.0, 0.0]]);
        let acts = cfg.actions.as_ref().unwrap();
        assert_eq!(acts.alpha.len(), 4);
        assert_eq!(acts.grid, 12);
        assert_eq!(cfg.chart.samples_grid, 8);
        assert_eq!(cfg.requested_analyses(), vec!["chart", "actions"]);
    }

    #[test]
    fn expression_error_points_into_the_canonical_text() {
        let bad = OSC.replace("alpha = 0, x1, 0, x2", "alpha = 0, x1 +* 3, 0, x2");
        let canonical = RawConfig::parse(&bad).unwrap().canonical();
        let Err(ConfigError::Expression { offset, .. }) = AnalysisConfig::from_text(&bad)
        else {
            panic!("expected an expression error");
        };
        assert_eq!(&canonical[offset..offset + 1], "*");
    }

    #[test]
    fn unknown_names_and_bad_counts_are_rejected() {
        let unknown = OSC.replace("alpha = 0, x1, 0, x2", "alpha = 0, z9, 0, x2");
        assert!(matches!(
            AnalysisConfig::from_text(&unknown),
            Err(ConfigError::Expression { .. })
        ));
        let short = OSC.replace("point = 1 0 1 0", "point = 1 0 1");
        assert!(matches!(
            AnalysisConfig::from_text(&short),
            Err(ConfigError::Value { .. })
        ));
        let lopsided = OSC.replace("integral = (x2^2 + y2^2)/2\n", "");
        assert!(matches!(
            AnalysisConfig::from_text(&lopsided),
            Err(ConfigError::System(_))
        ));
    }

    #[test]
    fn tolerance_flags_override_file_values() {
        let mut cfg = AnalysisConfig::from_text(OSC).unwrap();
        let (key, val) = parse_tol_flag("isotropy=1e-9").unwrap();
        apply_tolerance(&mut cfg.tols, &mut cfg.gates, &key, val).unwrap();
        assert_eq!(cfg.gates.isotropy, 1e-9);
        let (key, val) = parse_tol_flag("ode_rtol=1e-11").unwrap();
        apply_tolerance(&mut cfg.tols, &mut cfg.gates, &key, val).unwrap();
        assert_eq!(cfg.tols.ode.rtol, 1e-11);
        assert!(parse_tol_flag("no-equals-sign").is_err());
        assert!(apply_tolerance(&mut cfg.tols, &mut cfg.gates, "bogus", 1.0).is_err());
    }

    #[test]
    fn series_terms_beyond_maxdeg_are_rejected() {
        let text = "\
[system]
coords = x y
field = -y, x
integral = (x^2 + y^2)/2

[normalform]
mode = hamiltonian
vars = 2
maxdeg = 3
term = 2 0 : 1/2
term = 0 4 : 1
";
        let Err(err) = AnalysisConfig::from_text(text) else {
            panic!("expected a degree error");
        };
        assert!(err.to_string().contains("exceeds maxdeg"));
    }

    #[test]
    fn normalform_defaults_and_gamma_only_configs() {
        let text = "\
[system]
coords = x y
field = -y, x
integral = (x^2 + y^2)/2

[normalform]
adjoin = s2 2 1.4142135623730951
gamma = 1 + s2, s2
";
        let cfg = AnalysisConfig::from_text(text).unwrap();
        let nf = cfg.normalform.as_ref().unwrap();
        assert_eq!(nf.maxdeg, 6);
        assert!(nf.series.is_empty());
        assert_eq!(nf.gamma_texts, vec!["1 + s2", "s2"]);
        assert_eq!(nf.field.dim(), 2);
    }
}
