//! Model specifications and case-level data.
//!
//! A model file is line oriented; `#` starts a comment:
//!
//! ```text
//! latent: X
//! manifest: x1, x2, y1, y2
//! param: a, l1 = 1
//! eq x1: x1 = l1*X
//! eq y1: y1 = a*X
//! constraint center(X) hard
//! ```
//!
//! Every equation `lhs = rhs` is stored in residual form `lhs - rhs`.
//! Constraints are `center(latent)`, `normalize(latent)`,
//! `zerocov(eq, eq)` and `zerolatcov(latent, eq)`, optionally followed by
//! `soft [penalty]` (the default) or `hard`. Only `center` and `normalize`
//! may be hard.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{
    parse_expr, BinaryOp, CaseBindings, Expr, ParseError, Symbol, SymbolError, SymbolKind,
    SymbolTable, Tape,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: in equation `{label}`: {source}")]
    Expr {
        line: usize,
        label: String,
        #[source]
        source: ParseError,
    },
    #[error("line {line}: {source}")]
    Symbol {
        line: usize,
        #[source]
        source: SymbolError,
    },
    #[error("line {line}: duplicate equation label `{label}`")]
    DuplicateEquation { line: usize, label: String },
    #[error("latent variable `{0}` does not appear in any equation")]
    UnusedLatent(String),
    #[error("model has no equations")]
    NoEquations,
    #[error("line {line}: malformed constraint: {message}")]
    Constraint { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDecl {
    pub name: String,
    /// `Some(v)` pins the parameter; it is then not estimated.
    pub fixed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Equation {
    pub label: String,
    pub lhs: Expr,
    pub rhs: Expr,
    /// `lhs - rhs`.
    pub residual: Expr,
    pub latents: BTreeSet<usize>,
    pub manifests: BTreeSet<usize>,
}

impl Equation {
    /// Number of distinct latent variables in the equation.
    pub fn latent_count(&self) -> usize {
        self.latents.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConstraintKind {
    /// Sum of the latent's scores is zero.
    Center(usize),
    /// Sum of squared scores equals the case count.
    Normalize(usize),
    /// Residuals of two equations are uncorrelated.
    ZeroErrorCov(usize, usize),
    /// Latent scores are uncorrelated with an equation's residuals.
    ZeroLatentErrorCov(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ConstraintMode {
    /// Penalty term; `None` uses the objective's default penalty constant.
    Soft(Option<f64>),
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintDecl {
    pub kind: ConstraintKind,
    pub mode: ConstraintMode,
}

/// A measurement equation that pins a latent's scale: exactly one latent, one
/// manifest, and a derivative with respect to the latent that does not depend
/// on any free parameter or on the latent's value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleIndicator {
    pub equation: usize,
    pub manifest: usize,
    /// d(manifest)/d(latent) implied by the equation.
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    symbols: SymbolTable,
    params: Vec<ParamDecl>,
    equations: Vec<Equation>,
    tapes: Vec<Tape>,
    constraints: Vec<ConstraintDecl>,
    indicators: Vec<Option<ScaleIndicator>>,
    loading_like: Vec<bool>,
    warnings: Vec<String>,
}

impl Model {
    pub fn symbols(&self) -> &SymbolTable {
        &self.symbols
    }

    pub fn manifest_names(&self) -> &[String] {
        self.symbols.names(SymbolKind::Manifest)
    }

    pub fn latent_names(&self) -> &[String] {
        self.symbols.names(SymbolKind::Latent)
    }

    pub fn params(&self) -> &[ParamDecl] {
        &self.params
    }

    pub fn equations(&self) -> &[Equation] {
        &self.equations
    }

    pub(crate) fn tapes(&self) -> &[Tape] {
        &self.tapes
    }

    pub fn constraints(&self) -> &[ConstraintDecl] {
        &self.constraints
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn n_manifest(&self) -> usize {
        self.manifest_names().len()
    }

    pub fn n_latent(&self) -> usize {
        self.latent_names().len()
    }

    pub fn n_equations(&self) -> usize {
        self.equations.len()
    }

    /// Indices of parameters that are estimated, in declaration order.
    pub fn free_params(&self) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&s| self.params[s].fixed.is_none())
            .collect()
    }

    pub fn n_free_params(&self) -> usize {
        self.params.iter().filter(|p| p.fixed.is_none()).count()
    }

    pub fn equation_index(&self, label: &str) -> Option<usize> {
        self.equations.iter().position(|e| e.label == label)
    }

    pub fn latent_index(&self, name: &str) -> Option<usize> {
        match self.symbols.get(name) {
            Some(Symbol {
                kind: SymbolKind::Latent,
                index,
            }) => Some(index),
            _ => None,
        }
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        match self.symbols.get(name) {
            Some(Symbol {
                kind: SymbolKind::Param,
                index,
            }) => Some(index),
            _ => None,
        }
    }

    pub fn scale_indicator(&self, latent: usize) -> Option<ScaleIndicator> {
        self.indicators[latent]
    }

    /// Whether the parameter multiplies (or otherwise scales) a latent in a
    /// measurement equation. Such parameters start at 1, all others at 0.
    pub fn is_loading_like(&self, param: usize) -> bool {
        self.loading_like[param]
    }

    pub fn is_hard(&self, kind: impl Fn(&ConstraintKind) -> bool) -> bool {
        self.constraints
            .iter()
            .any(|c| c.mode == ConstraintMode::Hard && kind(&c.kind))
    }

    pub fn hard_center(&self, latent: usize) -> bool {
        self.is_hard(|k| *k == ConstraintKind::Center(latent))
    }

    pub fn hard_normalize(&self, latent: usize) -> bool {
        self.is_hard(|k| *k == ConstraintKind::Normalize(latent))
    }

    pub fn has_normalize(&self, latent: usize) -> bool {
        self.constraints
            .iter()
            .any(|c| c.kind == ConstraintKind::Normalize(latent))
    }

    /// Parameter vector with fixed values filled in and free ones taken from
    /// `free` (in [`Model::free_params`] order).
    pub fn full_params(&self, free: &[f64]) -> Vec<f64> {
        let mut it = free.iter();
        self.params
            .iter()
            .map(|p| match p.fixed {
                Some(v) => v,
                None => *it.next().expect("free parameter slice too short"),
            })
            .collect()
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}

fn split_list(text: &str) -> impl Iterator<Item = &str> {
    text.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn is_label(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

struct PendingEq {
    line: usize,
    label: String,
    lhs: String,
    rhs: String,
}

struct PendingConstraint {
    line: usize,
    name: String,
    args: Vec<String>,
    mode: ConstraintMode,
}

/// Parses and validates a model file.
pub fn parse_model(text: &str) -> Result<Model, ModelError> {
    let mut symbols = SymbolTable::new();
    let mut params = Vec::new();
    let mut eqs = Vec::new();
    let mut cons = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = strip_comment(raw).trim();
        if body.is_empty() {
            continue;
        }
        let (head, rest) = match body.split_once(|c: char| c.is_whitespace() || c == ':') {
            Some((h, r)) => (h, r),
            None => (body, ""),
        };
        let declare = |symbols: &mut SymbolTable, name: &str, kind| {
            symbols
                .declare(name, kind)
                .map_err(|source| ModelError::Symbol { line, source })
        };
        match head {
            "latent" | "manifest" | "param" => {
                let rest = rest.trim_start();
                let rest = rest.strip_prefix(':').unwrap_or(rest);
                for item in split_list(rest) {
                    match head {
                        "latent" => {
                            declare(&mut symbols, item, SymbolKind::Latent)?;
                        }
                        "manifest" => {
                            declare(&mut symbols, item, SymbolKind::Manifest)?;
                        }
                        _ => {
                            let (name, fixed) = match item.split_once('=') {
                                Some((n, v)) => {
                                    let v: f64 =
                                        v.trim().parse().map_err(|_| ModelError::Syntax {
                                            line,
                                            message: format!("bad fixed value in `{item}`"),
                                        })?;
                                    if !v.is_finite() {
                                        return Err(ModelError::Syntax {
                                            line,
                                            message: format!("non-finite fixed value in `{item}`"),
                                        });
                                    }
                                    (n.trim(), Some(v))
                                }
                                None => (item, None),
                            };
                            declare(&mut symbols, name, SymbolKind::Param)?;
                            params.push(ParamDecl {
                                name: name.to_string(),
                                fixed,
                            });
                        }
                    }
                }
            }
            "eq" => {
                let (label, eqn) = rest.split_once(':').ok_or_else(|| ModelError::Syntax {
                    line,
                    message: "expected `eq <label>: <expr> = <expr>`".into(),
                })?;
                let label = label.trim();
                if !is_label(label) {
                    return Err(ModelError::Syntax {
                        line,
                        message: format!("invalid equation label `{label}`"),
                    });
                }
                let parts: Vec<&str> = eqn.split('=').collect();
                if parts.len() != 2 {
                    return Err(ModelError::Syntax {
                        line,
                        message: "an equation needs exactly one `=`".into(),
                    });
                }
                eqs.push(PendingEq {
                    line,
                    label: label.to_string(),
                    lhs: parts[0].trim().to_string(),
                    rhs: parts[1].trim().to_string(),
                });
            }
            "constraint" => cons.push(parse_constraint_line(line, rest.trim())?),
            other => {
                return Err(ModelError::Syntax {
                    line,
                    message: format!("unknown directive `{other}`"),
                })
            }
        }
    }

    let mut equations: Vec<Equation> = Vec::with_capacity(eqs.len());
    let mut labels: HashMap<String, usize> = HashMap::new();
    for p in &eqs {
        if labels.insert(p.label.clone(), equations.len()).is_some() {
            return Err(ModelError::DuplicateEquation {
                line: p.line,
                label: p.label.clone(),
            });
        }
        let side = |t: &str| {
            parse_expr(t, &symbols).map_err(|source| ModelError::Expr {
                line: p.line,
                label: p.label.clone(),
                source,
            })
        };
        let lhs = side(&p.lhs)?;
        let rhs = side(&p.rhs)?;
        equations.push(make_equation(p.label.clone(), lhs, rhs));
    }

    let mut constraints = Vec::with_capacity(cons.len());
    for c in &cons {
        constraints.push(resolve_constraint(c, &symbols, &labels)?);
    }
    Model::assemble(symbols, params, equations, constraints)
}

pub fn parse_model_file(path: impl AsRef<Path>) -> Result<Model, crate::Error> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| crate::Error::Io(format!("{}: {e}", path.display())))?;
    parse_model(&text).map_err(|e| crate::Error::Model(format!("{}: {e}", path.display())))
}

fn make_equation(label: String, lhs: Expr, rhs: Expr) -> Equation {
    let residual = Expr::binary(BinaryOp::Sub, lhs.clone(), rhs.clone());
    let latents = residual.symbols_of_kind(SymbolKind::Latent);
    let manifests = residual.symbols_of_kind(SymbolKind::Manifest);
    Equation {
        label,
        lhs,
        rhs,
        residual,
        latents,
        manifests,
    }
}

fn parse_constraint_line(line: usize, text: &str) -> Result<PendingConstraint, ModelError> {
    let bad = |message: &str| ModelError::Constraint {
        line,
        message: message.to_string(),
    };
    let open = text.find('(').ok_or_else(|| bad("expected `kind(args)`"))?;
    let close = text.find(')').ok_or_else(|| bad("missing `)`"))?;
    if close < open {
        return Err(bad("mismatched parentheses"));
    }
    let name = text[..open].trim().to_string();
    let args: Vec<String> = text[open + 1..close]
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let tail: Vec<&str> = text[close + 1..].split_whitespace().collect();
    let mode = match tail.as_slice() {
        [] | ["soft"] => ConstraintMode::Soft(None),
        ["soft", p] => {
            let p: f64 = p.parse().map_err(|_| bad("penalty must be a number"))?;
            if !(p > 0.0 && p.is_finite()) {
                return Err(bad("penalty must be positive"));
            }
            ConstraintMode::Soft(Some(p))
        }
        ["hard"] => ConstraintMode::Hard,
        _ => {
            return Err(bad(
                "expected `soft [penalty]` or `hard` after the constraint",
            ))
        }
    };
    Ok(PendingConstraint {
        line,
        name,
        args,
        mode,
    })
}

fn resolve_constraint(
    c: &PendingConstraint,
    symbols: &SymbolTable,
    labels: &HashMap<String, usize>,
) -> Result<ConstraintDecl, ModelError> {
    let bad = |message: String| ModelError::Constraint {
        line: c.line,
        message,
    };
    let latent = |name: &str| match symbols.get(name) {
        Some(Symbol {
            kind: SymbolKind::Latent,
            index,
        }) => Ok(index),
        _ => Err(bad(format!("`{name}` is not a declared latent variable"))),
    };
    let equation = |name: &str| {
        labels
            .get(name)
            .copied()
            .ok_or_else(|| bad(format!("no equation labelled `{name}`")))
    };
    let arity = |k: usize| {
        if c.args.len() == k && c.args.iter().all(|a| !a.is_empty()) {
            Ok(())
        } else {
            Err(bad(format!("`{}` takes {k} argument(s)", c.name)))
        }
    };
    let kind = match c.name.as_str() {
        "center" => {
            arity(1)?;
            ConstraintKind::Center(latent(&c.args[0])?)
        }
        "normalize" => {
            arity(1)?;
            ConstraintKind::Normalize(latent(&c.args[0])?)
        }
        "zerocov" => {
            arity(2)?;
            let (a, b) = (equation(&c.args[0])?, equation(&c.args[1])?);
            if a == b {
                return Err(bad("zerocov needs two distinct equations".into()));
            }
            ConstraintKind::ZeroErrorCov(a, b)
        }
        "zerolatcov" => {
            arity(2)?;
            ConstraintKind::ZeroLatentErrorCov(latent(&c.args[0])?, equation(&c.args[1])?)
        }
        other => return Err(bad(format!("unknown constraint `{other}`"))),
    };
    if c.mode == ConstraintMode::Hard
        && !matches!(
            kind,
            ConstraintKind::Center(_) | ConstraintKind::Normalize(_)
        )
    {
        return Err(bad("only center and normalize can be hard".into()));
    }
    Ok(ConstraintDecl { kind, mode: c.mode })
}

impl Model {
    fn assemble(
        symbols: SymbolTable,
        params: Vec<ParamDecl>,
        equations: Vec<Equation>,
        constraints: Vec<ConstraintDecl>,
    ) -> Result<Model, ModelError> {
        if equations.is_empty() {
            return Err(ModelError::NoEquations);
        }
        let n_latent = symbols.len(SymbolKind::Latent);
        for q in 0..n_latent {
            if !equations.iter().any(|e| e.latents.contains(&q)) {
                return Err(ModelError::UnusedLatent(
                    symbols.names(SymbolKind::Latent)[q].clone(),
                ));
            }
        }
        let tapes = equations
            .iter()
            .map(|e| Tape::compile(&e.residual))
            .collect();
        let mut model = Model {
            symbols,
            params,
            equations,
            tapes,
            constraints,
            indicators: Vec::new(),
            loading_like: Vec::new(),
            warnings: Vec::new(),
        };
        model.indicators = (0..n_latent).map(|q| model.find_indicator(q)).collect();
        model.loading_like = (0..model.params.len())
            .map(|s| model.probe_loading(s))
            .collect();
        for q in 0..n_latent {
            if model.indicators[q].is_none() && !model.has_normalize(q) {
                model.warnings.push(format!(
                    "latent `{}` has neither a fixed-loading indicator nor a normalize() \
                     constraint; its scale may be unidentified",
                    model.latent_names()[q]
                ));
            }
        }
        for (s, p) in model.params.iter().enumerate() {
            let used = model
                .equations
                .iter()
                .any(|e| e.residual.symbols().contains(&Symbol::param(s)));
            if !used {
                model.warnings.push(format!(
                    "parameter `{}` is not used by any equation",
                    p.name
                ));
            }
        }
        Ok(model)
    }

    /// Reference parameter values used by structural probes: fixed values,
    /// and `fill` for free parameters.
    fn probe_params(&self, fill: f64) -> Vec<f64> {
        self.params
            .iter()
            .map(|p| p.fixed.unwrap_or(fill))
            .collect()
    }

    /// Partial derivatives of equation `l`'s residual at a probe point.
    fn probe_grad(&self, l: usize, manifest: f64, latent: f64, params: &[f64]) -> Vec<f64> {
        let m = vec![manifest; self.n_manifest()];
        let z = vec![latent; self.n_latent()];
        let b = CaseBindings {
            manifest: &m,
            latent: &z,
            params,
        };
        let tape = &self.tapes[l];
        let mut values = Vec::new();
        tape.forward(&b, &mut values);
        let mut adj = Vec::new();
        // layout: manifests, latents, params
        let (k, q) = (self.n_manifest(), self.n_latent());
        let mut out = vec![0.0; k + q + params.len()];
        tape.reverse(&values, 1.0, &mut adj, |s, d| {
            let slot = match s.kind {
                SymbolKind::Manifest => s.index,
                SymbolKind::Latent => k + s.index,
                SymbolKind::Param => k + q + s.index,
            };
            out[slot] += d;
        });
        out
    }

    fn find_indicator(&self, q: usize) -> Option<ScaleIndicator> {
        let k = self.n_manifest();
        for (l, eq) in self.equations.iter().enumerate() {
            if eq.latents.len() != 1 || !eq.latents.contains(&q) || eq.manifests.len() != 1 {
                continue;
            }
            let j = *eq.manifests.iter().next().unwrap();
            let mut slopes = Vec::new();
            for (mv, zv, pv) in [(0.3, 0.7, 1.0), (-1.1, -0.4, 1.7), (2.3, 1.9, -0.6)] {
                let g = self.probe_grad(l, mv, zv, &self.probe_params(pv));
                let (dx, dz) = (g[j], g[k + q]);
                if dx == 0.0 || !dx.is_finite() || !dz.is_finite() {
                    slopes.clear();
                    break;
                }
                slopes.push(-dz / dx);
            }
            if slopes.is_empty() || slopes[0] == 0.0 {
                continue;
            }
            let s0 = slopes[0];
            if slopes.iter().all(|s| (s - s0).abs() <= 1e-12 * s0.abs()) {
                return Some(ScaleIndicator {
                    equation: l,
                    manifest: j,
                    slope: s0,
                });
            }
        }
        None
    }

    fn probe_loading(&self, s: usize) -> bool {
        if self.params[s].fixed.is_some() {
            return false;
        }
        let k = self.n_manifest();
        for (l, eq) in self.equations.iter().enumerate() {
            if eq.latents.len() != 1 || eq.manifests.is_empty() {
                continue;
            }
            if !eq.residual.symbols().contains(&Symbol::param(s)) {
                continue;
            }
            let q = *eq.latents.iter().next().unwrap();
            let base = self.probe_params(1.0);
            let mut bumped = base.clone();
            bumped[s] = 1.7;
            let a = self.probe_grad(l, 0.3, 0.7, &base)[k + q];
            let b = self.probe_grad(l, 0.3, 0.7, &bumped)[k + q];
            if (a - b).abs() > 1e-12 * (a.abs() + b.abs()).max(1e-300) {
                return true;
            }
        }
        false
    }
}

/// Canonical text form; `parse_model(&print_model(m))` reproduces `m`.
pub fn print_model(model: &Model) -> String {
    let mut out = String::new();
    let syms = model.symbols();
    if model.n_latent() > 0 {
        let _ = writeln!(out, "latent: {}", model.latent_names().join(", "));
    }
    if model.n_manifest() > 0 {
        let _ = writeln!(out, "manifest: {}", model.manifest_names().join(", "));
    }
    if !model.params.is_empty() {
        let items: Vec<String> = model
            .params
            .iter()
            .map(|p| match p.fixed {
                Some(v) => format!("{} = {v:?}", p.name),
                None => p.name.clone(),
            })
            .collect();
        let _ = writeln!(out, "param: {}", items.join(", "));
    }
    for eq in model.equations() {
        let _ = writeln!(
            out,
            "eq {}: {} = {}",
            eq.label,
            eq.lhs.display(syms),
            eq.rhs.display(syms)
        );
    }
    for c in model.constraints() {
        let lat = |q: usize| model.latent_names()[q].as_str();
        let lab = |l: usize| model.equations[l].label.as_str();
        let body = match c.kind {
            ConstraintKind::Center(q) => format!("center({})", lat(q)),
            ConstraintKind::Normalize(q) => format!("normalize({})", lat(q)),
            ConstraintKind::ZeroErrorCov(a, b) => format!("zerocov({}, {})", lab(a), lab(b)),
            ConstraintKind::ZeroLatentErrorCov(q, l) => {
                format!("zerolatcov({}, {})", lat(q), lab(l))
            }
        };
        let mode = match c.mode {
            ConstraintMode::Soft(None) => String::new(),
            ConstraintMode::Soft(Some(p)) => format!(" soft {p:?}"),
            ConstraintMode::Hard => " hard".to_string(),
        };
        let _ = writeln!(out, "constraint {body}{mode}");
    }
    out
}

/// Layout of the optimizer's unknown vector: free parameters first, then
/// latent scores case-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnknownLayout {
    pub n_params: usize,
    pub n_cases: usize,
    pub n_latent: usize,
}

impl UnknownLayout {
    pub fn len(&self) -> usize {
        self.n_params + self.n_cases * self.n_latent
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn param(&self, s: usize) -> usize {
        s
    }

    #[inline]
    pub fn latent(&self, case: usize, q: usize) -> usize {
        self.n_params + case * self.n_latent + q
    }

    pub fn params<'a>(&self, u: &'a [f64]) -> &'a [f64] {
        &u[..self.n_params]
    }

    pub fn scores<'a>(&self, u: &'a [f64]) -> &'a [f64] {
        &u[self.n_params..self.len()]
    }
}

pub fn free_unknowns(model: &Model, n: usize) -> UnknownLayout {
    UnknownLayout {
        n_params: model.n_free_params(),
        n_cases: n,
        n_latent: model.n_latent(),
    }
}

// ---------------------------------------------------------------------------
// Data

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset has no rows")]
    Empty,
    #[error("row {row}: expected {expected} fields, found {found}")]
    Ragged {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}, column `{column}`: `{text}` is not a finite number")]
    BadValue {
        row: usize,
        column: String,
        text: String,
    },
    #[error("dataset has no column for manifest variable `{0}`")]
    MissingColumn(String),
    #[error("duplicate column `{0}`")]
    DuplicateColumn(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Case-by-variable numeric matrix with named columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    columns: Vec<String>,
    /// Row-major, `n_rows * columns.len()`.
    values: Vec<f64>,
}

impl Dataset {
    pub fn new(columns: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self, DataError> {
        if rows.is_empty() {
            return Err(DataError::Empty);
        }
        let mut seen = BTreeSet::new();
        for c in &columns {
            if !seen.insert(c.as_str()) {
                return Err(DataError::DuplicateColumn(c.clone()));
            }
        }
        let k = columns.len();
        let mut values = Vec::with_capacity(rows.len() * k);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(DataError::Ragged {
                    row: i + 1,
                    expected: k,
                    found: row.len(),
                });
            }
            for (j, v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(DataError::BadValue {
                        row: i + 1,
                        column: columns[j].clone(),
                        text: v.to_string(),
                    });
                }
            }
            values.extend_from_slice(row);
        }
        Ok(Dataset { columns, values })
    }

    /// Builds a dataset from column vectors of equal length.
    pub fn from_columns(columns: Vec<(String, Vec<f64>)>) -> Result<Self, DataError> {
        let n = columns.first().map_or(0, |c| c.1.len());
        let names = columns.iter().map(|c| c.0.clone()).collect();
        let rows = (0..n)
            .map(|i| columns.iter().map(|c| c.1[i]).collect())
            .collect();
        Dataset::new(names, rows)
    }

    pub fn from_csv_reader(reader: impl Read) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let columns: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != columns.len() {
                return Err(DataError::Ragged {
                    row: i + 1,
                    expected: columns.len(),
                    found: rec.len(),
                });
            }
            let mut row = Vec::with_capacity(rec.len());
            for (j, field) in rec.iter().enumerate() {
                match field.parse::<f64>() {
                    Ok(v) if v.is_finite() => row.push(v),
                    _ => {
                        return Err(DataError::BadValue {
                            row: i + 1,
                            column: columns[j].clone(),
                            text: field.to_string(),
                        })
                    }
                }
            }
            rows.push(row);
        }
        Dataset::new(columns, rows)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self, DataError> {
        Dataset::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn write_csv(&self, writer: impl std::io::Write) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.columns)?;
        for i in 0..self.n_rows() {
            w.write_record(self.row(i).iter().map(|v| format!("{v:?}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn n_rows(&self) -> usize {
        self.values.len() / self.columns.len().max(1)
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.columns.len();
        &self.values[i * k..(i + 1) * k]
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|i| self.row(i)[j]).collect()
    }

    pub fn column_by_name(&self, name: &str) -> Option<Vec<f64>> {
        self.column_index(name).map(|j| self.column(j))
    }

    /// Rows reordered by `order` (row `i` of the result is row `order[i]`).
    pub fn permute_rows(&self, order: &[usize]) -> Dataset {
        let k = self.n_cols();
        let mut values = Vec::with_capacity(self.values.len());
        for &i in order {
            values.extend_from_slice(&self.values[i * k..(i + 1) * k]);
        }
        Dataset {
            columns: self.columns.clone(),
            values,
        }
    }

    /// Each column shuffled by its own permutation.
    pub fn permute_columns(&self, orders: &[Vec<usize>]) -> Dataset {
        let k = self.n_cols();
        let n = self.n_rows();
        let mut values = vec![0.0; self.values.len()];
        for (j, order) in orders.iter().enumerate().take(k) {
            for i in 0..n {
                values[i * k + j] = self.values[order[i] * k + j];
            }
        }
        Dataset {
            columns: self.columns.clone(),
            values,
        }
    }

    /// Selects the model's manifest columns in model order.
    pub fn bind(&self, model: &Model) -> Result<BoundData, DataError> {
        let idx = model
            .manifest_names()
            .iter()
            .map(|name| {
                self.column_index(name)
                    .ok_or_else(|| DataError::MissingColumn(name.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let n = self.n_rows();
        let k = idx.len();
        let mut values = Vec::with_capacity(n * k);
        for i in 0..n {
            let row = self.row(i);
            values.extend(idx.iter().map(|&j| row[j]));
        }
        Ok(BoundData { n, k, values })
    }
}

/// Data matrix aligned with a model's manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundData {
    n: usize,
    k: usize,
    values: Vec<f64>,
}

impl BoundData {
    pub fn n_cases(&self) -> usize {
        self.n
    }

    pub fn n_manifest(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.k..(i + 1) * self.k]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.values[i * self.k + j]).collect()
    }

    /// Mean of squared entries; zero for an empty manifest set.
    pub fn mean_square(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().map(|v| v * v).sum::<f64>() / self.values.len() as f64
    }

    /// Mean of the column variances (population form).
    pub fn mean_variance(&self) -> f64 {
        if self.k == 0 {
            return 0.0;
        }
        (0..self.k)
            .map(|j| crate::stats::variance(&self.column(j)))
            .sum::<f64>()
            / self.k as f64
    }
}
