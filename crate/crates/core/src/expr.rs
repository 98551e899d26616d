//! Model-equation expressions.
//!
//! An [`Expr`] is an immutable tree over manifest variables, latent variables,
//! parameters and real constants. Trees are built by [`parse_expr`] against a
//! [`SymbolTable`], so every leaf already carries a resolved [`Symbol`].
//!
//! For the estimator's hot path an expression is lowered once to a [`Tape`]
//! (a flat, topologically ordered instruction list) which supports a forward
//! sweep for values and a reverse sweep for exact partial derivatives.
//!
//! Grammar:
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := atom ('^' integer)? | '-' factor
//! atom   := number | identifier | identifier '(' expr ')' | '(' expr ')'
//! ```
//!
//! The function identifiers are `exp`, `abs` and `theta`, where
//! `theta(x) = (x + |x|) / 2`. At the kinks of `abs` and `theta` the
//! derivative is taken to be zero.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

/// What a name in an equation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SymbolKind {
    Manifest,
    Latent,
    Param,
}

impl fmt::Display for SymbolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SymbolKind::Manifest => "manifest",
            SymbolKind::Latent => "latent",
            SymbolKind::Param => "param",
        })
    }
}

/// A resolved reference: the kind plus the index within that kind's
/// declaration list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Symbol {
    pub kind: SymbolKind,
    pub index: usize,
}

impl Symbol {
    pub fn manifest(index: usize) -> Self {
        Self {
            kind: SymbolKind::Manifest,
            index,
        }
    }

    pub fn latent(index: usize) -> Self {
        Self {
            kind: SymbolKind::Latent,
            index,
        }
    }

    pub fn param(index: usize) -> Self {
        Self {
            kind: SymbolKind::Param,
            index,
        }
    }
}

/// Names reserved for built-in functions.
pub const FUNCTION_NAMES: [&str; 3] = ["exp", "abs", "theta"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SymbolError {
    #[error("`{0}` is declared more than once")]
    Duplicate(String),
    #[error("`{0}` is a reserved function name")]
    Reserved(String),
    #[error("`{0}` is not a valid identifier")]
    InvalidName(String),
}

/// Declared names, grouped by kind, in declaration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SymbolTable {
    lookup: HashMap<String, Symbol>,
    manifests: Vec<String>,
    latents: Vec<String>,
    params: Vec<String>,
}

impl SymbolTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare(&mut self, name: &str, kind: SymbolKind) -> Result<Symbol, SymbolError> {
        if !is_identifier(name) {
            return Err(SymbolError::InvalidName(name.to_string()));
        }
        if FUNCTION_NAMES.contains(&name) {
            return Err(SymbolError::Reserved(name.to_string()));
        }
        if self.lookup.contains_key(name) {
            return Err(SymbolError::Duplicate(name.to_string()));
        }
        let list = match kind {
            SymbolKind::Manifest => &mut self.manifests,
            SymbolKind::Latent => &mut self.latents,
            SymbolKind::Param => &mut self.params,
        };
        let symbol = Symbol {
            kind,
            index: list.len(),
        };
        list.push(name.to_string());
        self.lookup.insert(name.to_string(), symbol);
        Ok(symbol)
    }

    pub fn get(&self, name: &str) -> Option<Symbol> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, symbol: Symbol) -> &str {
        match symbol.kind {
            SymbolKind::Manifest => &self.manifests[symbol.index],
            SymbolKind::Latent => &self.latents[symbol.index],
            SymbolKind::Param => &self.params[symbol.index],
        }
    }

    pub fn names(&self, kind: SymbolKind) -> &[String] {
        match kind {
            SymbolKind::Manifest => &self.manifests,
            SymbolKind::Latent => &self.latents,
            SymbolKind::Param => &self.params,
        }
    }

    pub fn len(&self, kind: SymbolKind) -> usize {
        self.names(kind).len()
    }
}

pub(crate) fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Neg,
    Abs,
    Exp,
    /// Positive part, `(x + |x|) / 2`.
    Theta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Symbol),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
    /// Integer power.
    Pow(Box<Expr>, i32),
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum EvalError {
    #[error("expression evaluated to a non-finite value ({0})")]
    NonFinite(f64),
}

/// Values for every symbol an expression may reference.
pub trait Bindings {
    fn value(&self, symbol: Symbol) -> f64;
}

/// Bindings for one case: its data row, its latent scores and the full
/// parameter vector (fixed and free).
#[derive(Debug, Clone, Copy)]
pub struct CaseBindings<'a> {
    pub manifest: &'a [f64],
    pub latent: &'a [f64],
    pub params: &'a [f64],
}

impl Bindings for CaseBindings<'_> {
    #[inline]
    fn value(&self, symbol: Symbol) -> f64 {
        match symbol.kind {
            SymbolKind::Manifest => self.manifest[symbol.index],
            SymbolKind::Latent => self.latent[symbol.index],
            SymbolKind::Param => self.params[symbol.index],
        }
    }
}

impl<F: Fn(Symbol) -> f64> Bindings for F {
    fn value(&self, symbol: Symbol) -> f64 {
        self(symbol)
    }
}

#[inline]
pub(crate) fn theta(x: f64) -> f64 {
    (x + x.abs()) / 2.0
}

#[inline]
fn abs_slope(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn theta_slope(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

impl Expr {
    pub fn constant(value: f64) -> Self {
        Expr::Const(value)
    }

    pub fn var(symbol: Symbol) -> Self {
        Expr::Var(symbol)
    }

    pub fn unary(op: UnaryOp, arg: Expr) -> Self {
        Expr::Unary(op, Box::new(arg))
    }

    pub fn binary(op: BinaryOp, lhs: Expr, rhs: Expr) -> Self {
        Expr::Binary(op, Box::new(lhs), Box::new(rhs))
    }

    pub fn pow(base: Expr, exponent: i32) -> Self {
        Expr::Pow(Box::new(base), exponent)
    }

    /// Value at the bound point.
    pub fn eval(&self, bindings: &impl Bindings) -> Result<f64, EvalError> {
        let v = self.eval_raw(bindings);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite(v))
        }
    }

    fn eval_raw(&self, b: &impl Bindings) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(s) => b.value(*s),
            Expr::Unary(op, a) => {
                let x = a.eval_raw(b);
                match op {
                    UnaryOp::Neg => -x,
                    UnaryOp::Abs => x.abs(),
                    UnaryOp::Exp => x.exp(),
                    UnaryOp::Theta => theta(x),
                }
            }
            Expr::Binary(op, l, r) => {
                let x = l.eval_raw(b);
                let y = r.eval_raw(b);
                match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                    BinaryOp::Div => x / y,
                }
            }
            Expr::Pow(a, k) => a.eval_raw(b).powi(*k),
        }
    }

    /// Partial derivatives with respect to each symbol in `wrt`, in order.
    pub fn grad(&self, wrt: &[Symbol], bindings: &impl Bindings) -> Result<Vec<f64>, EvalError> {
        let tape = Tape::compile(self);
        let mut values = Vec::new();
        let value = tape.forward(bindings, &mut values);
        if !value.is_finite() {
            return Err(EvalError::NonFinite(value));
        }
        let mut adjoints = Vec::new();
        let mut out = vec![0.0; wrt.len()];
        tape.reverse(&values, 1.0, &mut adjoints, |sym, d| {
            for (slot, w) in out.iter_mut().zip(wrt) {
                if *w == sym {
                    *slot += d;
                }
            }
        });
        for d in &out {
            if !d.is_finite() {
                return Err(EvalError::NonFinite(*d));
            }
        }
        Ok(out)
    }

    /// Every symbol referenced anywhere in the tree.
    pub fn symbols(&self) -> BTreeSet<Symbol> {
        let mut out = BTreeSet::new();
        self.collect_symbols(&mut out);
        out
    }

    fn collect_symbols(&self, out: &mut BTreeSet<Symbol>) {
        match self {
            Expr::Const(_) => {}
            Expr::Var(s) => {
                out.insert(*s);
            }
            Expr::Unary(_, a) | Expr::Pow(a, _) => a.collect_symbols(out),
            Expr::Binary(_, l, r) => {
                l.collect_symbols(out);
                r.collect_symbols(out);
            }
        }
    }

    pub fn symbols_of_kind(&self, kind: SymbolKind) -> BTreeSet<usize> {
        self.symbols()
            .into_iter()
            .filter(|s| s.kind == kind)
            .map(|s| s.index)
            .collect()
    }

    /// Renders the expression with the minimal parentheses needed for the
    /// grammar to read it back as the same tree.
    pub fn display<'a>(&'a self, symbols: &'a SymbolTable) -> ExprDisplay<'a> {
        ExprDisplay {
            expr: self,
            symbols,
        }
    }
}

pub struct ExprDisplay<'a> {
    expr: &'a Expr,
    symbols: &'a SymbolTable,
}

impl fmt::Display for ExprDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_expr(f, self.expr, self.symbols, 0)
    }
}

// 0: sum, 1: term, 2: factor, 3: atom
fn level(e: &Expr) -> u8 {
    match e {
        Expr::Const(c) if *c < 0.0 => 2,
        Expr::Const(_) | Expr::Var(_) => 3,
        Expr::Unary(UnaryOp::Neg, _) => 2,
        Expr::Unary(_, _) => 3,
        Expr::Pow(_, _) => 2,
        Expr::Binary(BinaryOp::Mul | BinaryOp::Div, _, _) => 1,
        Expr::Binary(BinaryOp::Add | BinaryOp::Sub, _, _) => 0,
    }
}

fn write_expr(f: &mut fmt::Formatter<'_>, e: &Expr, syms: &SymbolTable, min: u8) -> fmt::Result {
    let wrap = level(e) < min;
    if wrap {
        f.write_str("(")?;
    }
    match e {
        Expr::Const(c) => write!(f, "{c}")?,
        Expr::Var(s) => f.write_str(syms.name(*s))?,
        Expr::Unary(op, a) => match op {
            UnaryOp::Neg => {
                f.write_str("-")?;
                write_expr(f, a, syms, 2)?;
            }
            UnaryOp::Abs | UnaryOp::Exp | UnaryOp::Theta => {
                let name = match op {
                    UnaryOp::Abs => "abs",
                    UnaryOp::Exp => "exp",
                    _ => "theta",
                };
                write!(f, "{name}(")?;
                write_expr(f, a, syms, 0)?;
                f.write_str(")")?;
            }
        },
        Expr::Pow(a, k) => {
            write_expr(f, a, syms, 3)?;
            write!(f, "^{k}")?;
        }
        Expr::Binary(op, l, r) => {
            let (sym, lmin, rmin) = match op {
                BinaryOp::Add => (" + ", 0, 1),
                BinaryOp::Sub => (" - ", 0, 1),
                BinaryOp::Mul => ("*", 1, 2),
                BinaryOp::Div => ("/", 1, 2),
            };
            write_expr(f, l, syms, lmin)?;
            f.write_str(sym)?;
            write_expr(f, r, syms, rmin)?;
        }
    }
    if wrap {
        f.write_str(")")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Parsing

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at column {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("undeclared identifier `{name}` at column {position}")]
    Undeclared { name: String, position: usize },
}

impl ParseError {
    /// 1-based column of the offending token.
    pub fn position(&self) -> usize {
        match self {
            ParseError::Syntax { position, .. } | ParseError::Undeclared { position, .. } => {
                *position
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Number(f64),
    Integer(i64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    End,
}

fn tokenize(text: &str) -> Result<Vec<(Token, usize)>, ParseError> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let pos = i + 1;
        match c {
            b' ' | b'\t' | b'\r' | b'\n' => {
                i += 1;
                continue;
            }
            b'+' => tokens.push((Token::Plus, pos)),
            b'-' => tokens.push((Token::Minus, pos)),
            b'*' => tokens.push((Token::Star, pos)),
            b'/' => tokens.push((Token::Slash, pos)),
            b'^' => tokens.push((Token::Caret, pos)),
            b'(' => tokens.push((Token::LParen, pos)),
            b')' => tokens.push((Token::RParen, pos)),
            b'0'..=b'9' | b'.' => {
                let start = i;
                let mut integral = true;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'.' {
                    integral = false;
                    i += 1;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        integral = false;
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let lexeme = &text[start..i];
                let value: f64 = lexeme.parse().map_err(|_| ParseError::Syntax {
                    position: pos,
                    message: format!("malformed number `{lexeme}`"),
                })?;
                let token = match (integral, lexeme.parse::<i64>()) {
                    (true, Ok(k)) => Token::Integer(k),
                    _ => Token::Number(value),
                };
                tokens.push((token, pos));
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                tokens.push((Token::Ident(text[start..i].to_string()), pos));
                continue;
            }
            _ => {
                let ch = text[i..].chars().next().unwrap_or('?');
                return Err(ParseError::Syntax {
                    position: pos,
                    message: format!("unexpected character `{ch}`"),
                });
            }
        }
        i += 1;
    }
    tokens.push((Token::End, text.len() + 1));
    Ok(tokens)
}

struct Parser<'a> {
    tokens: Vec<(Token, usize)>,
    at: usize,
    symbols: &'a SymbolTable,
}

impl Parser<'_> {
    fn peek(&self) -> &Token {
        &self.tokens[self.at].0
    }

    fn position(&self) -> usize {
        self.tokens[self.at].1
    }

    fn bump(&mut self) -> (Token, usize) {
        let t = self.tokens[self.at].clone();
        if self.at + 1 < self.tokens.len() {
            self.at += 1;
        }
        t
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError::Syntax {
            position: self.position(),
            message: message.into(),
        })
    }

    fn expect(&mut self, token: Token, what: &str) -> Result<(), ParseError> {
        if *self.peek() == token {
            self.bump();
            Ok(())
        } else {
            self.error(format!("expected {what}"))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Token::Plus => BinaryOp::Add,
                Token::Minus => BinaryOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Expr::binary(op, lhs, rhs);
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            let op = match self.peek() {
                Token::Star => BinaryOp::Mul,
                Token::Slash => BinaryOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.factor()?;
            lhs = Expr::binary(op, lhs, rhs);
        }
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        if *self.peek() == Token::Minus {
            self.bump();
            return Ok(Expr::unary(UnaryOp::Neg, self.factor()?));
        }
        let base = self.atom()?;
        if *self.peek() != Token::Caret {
            return Ok(base);
        }
        self.bump();
        let negative = if *self.peek() == Token::Minus {
            self.bump();
            true
        } else {
            false
        };
        match self.peek().clone() {
            Token::Integer(k) => {
                let k = if negative { -k } else { k };
                let k = i32::try_from(k).or_else(|_| self.error("exponent out of range"))?;
                self.bump();
                Ok(Expr::pow(base, k))
            }
            _ => self.error("exponent must be an integer literal"),
        }
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let (token, position) = self.bump();
        match token {
            Token::Number(v) => Ok(Expr::Const(v)),
            Token::Integer(k) => Ok(Expr::Const(k as f64)),
            Token::LParen => {
                let inner = self.expr()?;
                self.expect(Token::RParen, "`)`")?;
                Ok(inner)
            }
            Token::Ident(name) => {
                if *self.peek() == Token::LParen {
                    let op = match name.as_str() {
                        "exp" => UnaryOp::Exp,
                        "abs" => UnaryOp::Abs,
                        "theta" => UnaryOp::Theta,
                        _ => {
                            return Err(ParseError::Syntax {
                                position,
                                message: format!("unknown function `{name}`"),
                            })
                        }
                    };
                    self.bump();
                    let arg = self.expr()?;
                    self.expect(Token::RParen, "`)`")?;
                    return Ok(Expr::unary(op, arg));
                }
                match self.symbols.get(&name) {
                    Some(s) => Ok(Expr::Var(s)),
                    None => Err(ParseError::Undeclared { name, position }),
                }
            }
            Token::End => Err(ParseError::Syntax {
                position,
                message: "unexpected end of expression".into(),
            }),
            other => Err(ParseError::Syntax {
                position,
                message: format!("unexpected token {other:?}"),
            }),
        }
    }
}

/// Parses `text` against `symbols`; every identifier must already be declared.
pub fn parse_expr(text: &str, symbols: &SymbolTable) -> Result<Expr, ParseError> {
    let tokens = tokenize(text)?;
    let mut parser = Parser {
        tokens,
        at: 0,
        symbols,
    };
    let e = parser.expr()?;
    if *parser.peek() != Token::End {
        return parser.error("unexpected trailing input");
    }
    Ok(e)
}

// ---------------------------------------------------------------------------
// Tape

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Const(f64),
    Var(Symbol),
    Neg(usize),
    Abs(usize),
    Exp(usize),
    Theta(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Pow(usize, i32),
}

/// Flattened expression for repeated evaluation. The last instruction is the
/// output.
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    ops: Vec<Op>,
}

impl Tape {
    pub fn compile(e: &Expr) -> Self {
        let mut ops = Vec::new();
        emit(e, &mut ops);
        Tape { ops }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Forward sweep. `values` is scratch space reused across calls.
    #[inline]
    pub fn forward(&self, b: &impl Bindings, values: &mut Vec<f64>) -> f64 {
        values.clear();
        for op in &self.ops {
            let v = match *op {
                Op::Const(c) => c,
                Op::Var(s) => b.value(s),
                Op::Neg(a) => -values[a],
                Op::Abs(a) => values[a].abs(),
                Op::Exp(a) => values[a].exp(),
                Op::Theta(a) => theta(values[a]),
                Op::Add(a, c) => values[a] + values[c],
                Op::Sub(a, c) => values[a] - values[c],
                Op::Mul(a, c) => values[a] * values[c],
                Op::Div(a, c) => values[a] / values[c],
                Op::Pow(a, k) => values[a].powi(k),
            };
            values.push(v);
        }
        *values.last().unwrap_or(&0.0)
    }

    /// Reverse sweep after [`Tape::forward`]; calls `sink(symbol, d)` once per
    /// leaf occurrence with `seed` times the partial derivative of the output
    /// with respect to that occurrence.
    #[inline]
    pub fn reverse(
        &self,
        values: &[f64],
        seed: f64,
        adjoints: &mut Vec<f64>,
        mut sink: impl FnMut(Symbol, f64),
    ) {
        let n = self.ops.len();
        adjoints.clear();
        adjoints.resize(n, 0.0);
        if n == 0 {
            return;
        }
        adjoints[n - 1] = seed;
        for k in (0..n).rev() {
            let g = adjoints[k];
            if g == 0.0 {
                continue;
            }
            match self.ops[k] {
                Op::Const(_) => {}
                Op::Var(s) => sink(s, g),
                Op::Neg(a) => adjoints[a] -= g,
                Op::Abs(a) => adjoints[a] += g * abs_slope(values[a]),
                Op::Exp(a) => adjoints[a] += g * values[k],
                Op::Theta(a) => adjoints[a] += g * theta_slope(values[a]),
                Op::Add(a, c) => {
                    adjoints[a] += g;
                    adjoints[c] += g;
                }
                Op::Sub(a, c) => {
                    adjoints[a] += g;
                    adjoints[c] -= g;
                }
                Op::Mul(a, c) => {
                    adjoints[a] += g * values[c];
                    adjoints[c] += g * values[a];
                }
                Op::Div(a, c) => {
                    let d = values[c];
                    adjoints[a] += g / d;
                    adjoints[c] -= g * values[a] / (d * d);
                }
                Op::Pow(a, p) => {
                    if p != 0 {
                        adjoints[a] += g * f64::from(p) * values[a].powi(p - 1);
                    }
                }
            }
        }
    }
}

fn emit(e: &Expr, ops: &mut Vec<Op>) -> usize {
    let op = match e {
        Expr::Const(c) => Op::Const(*c),
        Expr::Var(s) => Op::Var(*s),
        Expr::Unary(op, a) => {
            let a = emit(a, ops);
            match op {
                UnaryOp::Neg => Op::Neg(a),
                UnaryOp::Abs => Op::Abs(a),
                UnaryOp::Exp => Op::Exp(a),
                UnaryOp::Theta => Op::Theta(a),
            }
        }
        Expr::Binary(op, l, r) => {
            let l = emit(l, ops);
            let r = emit(r, ops);
            match op {
                BinaryOp::Add => Op::Add(l, r),
                BinaryOp::Sub => Op::Sub(l, r),
                BinaryOp::Mul => Op::Mul(l, r),
                BinaryOp::Div => Op::Div(l, r),
            }
        }
        Expr::Pow(a, k) => {
            let a = emit(a, ops);
            Op::Pow(a, *k)
        }
    };
    ops.push(op);
    ops.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table() -> SymbolTable {
        let mut t = SymbolTable::new();
        t.declare("x", SymbolKind::Manifest).unwrap();
        t.declare("y", SymbolKind::Manifest).unwrap();
        t.declare("Z", SymbolKind::Latent).unwrap();
        t.declare("xi1", SymbolKind::Latent).unwrap();
        t.declare("xi2", SymbolKind::Latent).unwrap();
        t.declare("X0", SymbolKind::Latent).unwrap();
        t.declare("a", SymbolKind::Param).unwrap();
        t.declare("O1", SymbolKind::Param).unwrap();
        t.declare("om11", SymbolKind::Param).unwrap();
        t.declare("om12", SymbolKind::Param).unwrap();
        t.declare("d1", SymbolKind::Param).unwrap();
        t.declare("k1", SymbolKind::Param).unwrap();
        t
    }

    fn v(t: &SymbolTable, name: &str) -> Expr {
        Expr::Var(t.get(name).unwrap())
    }

    fn at(pairs: &[(Symbol, f64)]) -> impl Fn(Symbol) -> f64 {
        let pairs = pairs.to_vec();
        move |s| {
            pairs
                .iter()
                .find(|(k, _)| *k == s)
                .map(|p| p.1)
                .unwrap_or(0.0)
        }
    }

    #[test]
    fn parses_measurement_equation() {
        let t = table();
        let e = parse_expr("1*xi1 + O1", &t).unwrap();
        let expected = Expr::binary(
            BinaryOp::Add,
            Expr::binary(BinaryOp::Mul, Expr::Const(1.0), v(&t, "xi1")),
            v(&t, "O1"),
        );
        assert_eq!(e, expected);
    }

    #[test]
    fn power_binds_tighter_than_product() {
        let t = table();
        let e = parse_expr("om11*xi1^2 + om12*xi1*xi2", &t).unwrap();
        let sq = Expr::pow(v(&t, "xi1"), 2);
        let first = Expr::binary(BinaryOp::Mul, v(&t, "om11"), sq);
        let second = Expr::binary(
            BinaryOp::Mul,
            Expr::binary(BinaryOp::Mul, v(&t, "om12"), v(&t, "xi1")),
            v(&t, "xi2"),
        );
        assert_eq!(e, Expr::binary(BinaryOp::Add, first, second));
    }

    #[test]
    fn unary_minus_below_power() {
        let t = table();
        let e = parse_expr("-Z^2", &t).unwrap();
        assert_eq!(e, Expr::unary(UnaryOp::Neg, Expr::pow(v(&t, "Z"), 2)));
        let b = at(&[(Symbol::latent(0), 3.0)]);
        assert_eq!(e.eval(&b).unwrap(), -9.0);
    }

    #[test]
    fn theta_call() {
        let t = table();
        let e = parse_expr("theta(X0)", &t).unwrap();
        assert_eq!(e, Expr::unary(UnaryOp::Theta, v(&t, "X0")));
        let x0 = t.get("X0").unwrap();
        assert_eq!(e.eval(&at(&[(x0, -3.0)])).unwrap(), 0.0);
        assert_eq!(e.eval(&at(&[(x0, 3.0)])).unwrap(), 3.0);
    }

    #[test]
    fn exponential_indicator_at_origin() {
        let t = table();
        let e = parse_expr("d1*exp(k1*X0)", &t).unwrap();
        let b = at(&[
            (t.get("d1").unwrap(), 3.0),
            (t.get("k1").unwrap(), 0.5),
            (t.get("X0").unwrap(), 0.0),
        ]);
        assert_eq!(e.eval(&b).unwrap(), 3.0);
    }

    #[test]
    fn undeclared_identifier_is_named() {
        let t = table();
        match parse_expr("a*Z + bogus", &t) {
            Err(ParseError::Undeclared { name, position }) => {
                assert_eq!(name, "bogus");
                assert_eq!(position, 7);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn syntax_errors_carry_position() {
        let t = table();
        let err = parse_expr("a * (Z + 1", &t).unwrap_err();
        assert!(
            matches!(err, ParseError::Syntax { position: 11, .. }),
            "{err:?}"
        );
        assert!(parse_expr("Z^1.5", &t).is_err());
        assert!(parse_expr("a Z", &t).is_err());
        assert!(parse_expr("sin(Z)", &t).is_err());
        assert!(parse_expr("", &t).is_err());
    }

    #[test]
    fn reserved_names_cannot_be_declared() {
        let mut t = SymbolTable::new();
        assert_eq!(
            t.declare("theta", SymbolKind::Latent),
            Err(SymbolError::Reserved("theta".into()))
        );
        t.declare("Z", SymbolKind::Latent).unwrap();
        assert!(t.declare("Z", SymbolKind::Param).is_err());
        assert!(t.declare("1Z", SymbolKind::Param).is_err());
    }

    #[test]
    fn division_by_zero_is_non_finite() {
        let t = table();
        let e = parse_expr("a / Z", &t).unwrap();
        let b = at(&[(t.get("a").unwrap(), 1.0)]);
        assert!(matches!(e.eval(&b), Err(EvalError::NonFinite(_))));
    }

    #[test]
    fn product_rule() {
        let t = table();
        let e = parse_expr("a*Z", &t).unwrap();
        let (a, z) = (t.get("a").unwrap(), t.get("Z").unwrap());
        let g = e.grad(&[a, z], &at(&[(a, 2.0), (z, 3.0)])).unwrap();
        assert_eq!(g, vec![3.0, 2.0]);
    }

    #[test]
    fn regression_residual_gradient_matches_finite_difference() {
        let t = table();
        let e = parse_expr("(x - Z)^2 + (y - a*Z)^2", &t).unwrap();
        let (x, y, a, z) = (
            t.get("x").unwrap(),
            t.get("y").unwrap(),
            t.get("a").unwrap(),
            t.get("Z").unwrap(),
        );
        let point = |zv: f64| vec![(x, 1.0), (y, 2.0), (a, 1.0), (z, zv)];
        let h = 1e-6;
        let hi = point(h);
        let lo = point(-h);
        let fd = (e.eval(&at(&hi)).unwrap() - e.eval(&at(&lo)).unwrap()) / (2.0 * h);
        assert!((fd + 6.0).abs() < 1e-6);
        let p0 = point(0.0);
        let g = e.grad(&[z], &at(&p0)).unwrap();
        assert_eq!(g, vec![-6.0]);
    }

    #[test]
    fn kink_subgradients_are_zero() {
        let t = table();
        let z = t.get("Z").unwrap();
        let abs = parse_expr("abs(Z)", &t).unwrap();
        let th = parse_expr("theta(Z)", &t).unwrap();
        let b = at(&[(z, 0.0)]);
        assert_eq!(abs.grad(&[z], &b).unwrap(), vec![0.0]);
        assert_eq!(th.grad(&[z], &b).unwrap(), vec![0.0]);
        let b = at(&[(z, -2.0)]);
        assert_eq!(abs.grad(&[z], &b).unwrap(), vec![-1.0]);
        assert_eq!(th.grad(&[z], &b).unwrap(), vec![0.0]);
    }

    #[test]
    fn printing_uses_minimal_parentheses() {
        let t = table();
        for (src, printed) in [
            ("a*(Z + O1)", "a*(Z + O1)"),
            ("a - (Z - O1)", "a - (Z - O1)"),
            ("(a - Z) - O1", "a - Z - O1"),
            ("-Z^2", "-Z^2"),
            ("(-Z)^2", "(-Z)^2"),
            ("a / (Z*O1)", "a/(Z*O1)"),
            ("exp(k1*X0)^2", "exp(k1*X0)^2"),
            ("Z^-2", "Z^-2"),
            ("a - -Z", "a - -Z"),
        ] {
            let e = parse_expr(src, &t).unwrap();
            assert_eq!(e.display(&t).to_string(), printed, "{src}");
        }
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0u32..1000).prop_map(|k| Expr::Const(f64::from(k) / 8.0)),
            (0usize..2).prop_map(|i| Expr::Var(Symbol::manifest(i))),
            (0usize..4).prop_map(|i| Expr::Var(Symbol::latent(i))),
            (0usize..6).prop_map(|i| Expr::Var(Symbol::param(i))),
        ];
        leaf.prop_recursive(5, 40, 2, |inner| {
            prop_oneof![
                (inner.clone(), 0..4u8).prop_map(|(e, k)| {
                    let op = [UnaryOp::Neg, UnaryOp::Abs, UnaryOp::Exp, UnaryOp::Theta][k as usize];
                    Expr::unary(op, e)
                }),
                (inner.clone(), inner.clone(), 0..4u8).prop_map(|(l, r, k)| {
                    let op =
                        [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div][k as usize];
                    Expr::binary(op, l, r)
                }),
                (inner, -3i32..4).prop_map(|(e, k)| Expr::pow(e, k)),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_then_parse_is_identity(e in arb_expr()) {
            let t = table();
            let printed = e.display(&t).to_string();
            let back = parse_expr(&printed, &t).unwrap();
            prop_assert_eq!(&back, &e);
            prop_assert_eq!(back.display(&t).to_string(), printed);
        }

        #[test]
        fn theta_is_positive_part(x in -1e6f64..1e6) {
            prop_assert_eq!(theta(x), (x + x.abs()) / 2.0);
            prop_assert!((theta(x) + theta(-x) - x.abs()).abs() <= 1e-9 * x.abs().max(1.0));
        }

        #[test]
        fn tape_matches_tree(e in arb_expr(), seed in 0u64..1000) {
            let vals: Vec<f64> = (0..12).map(|i| ((seed + i * 7919) % 97) as f64 / 31.0 - 1.4).collect();
            let b = |s: Symbol| match s.kind {
                SymbolKind::Manifest => vals[s.index],
                SymbolKind::Latent => vals[2 + s.index],
                SymbolKind::Param => vals[6 + s.index],
            };
            let tree = e.eval_raw(&b);
            let mut scratch = Vec::new();
            let tape = Tape::compile(&e).forward(&b, &mut scratch);
            prop_assert!(tree.to_bits() == tape.to_bits() || (tree.is_nan() && tape.is_nan()));
        }
    }
}
