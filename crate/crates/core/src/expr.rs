//! Exact symbolic expressions over rational constants, named irrational
//! constants, and indexed coordinates.
//!
//! Expressions are immutable trees shared through [`Arc`]. Numeric literals
//! are exact `BigRational` values, so constant folding never loses precision.
//! Simplification is deliberately limited to constant folding and 0/1
//! identities; there is no general rewriting, which keeps derivative output
//! predictable and keeps structural equality meaningful.
//!
//! Design notes:
//!
//! * Canonical form orders the children of commutative nodes under the
//!   derived total order, folds literal negation (`-(3) -> -3`) and literal
//!   fractions (`3/4` as a single rational). [`print_expr`] always emits the
//!   canonical form, so `parse(print(e))` structurally equals
//!   [`canonical`]`(e)` for every expression; printed text is a stable
//!   serialization used verbatim in reports.
//! * `^` takes an integer literal exponent only. This keeps the grammar
//!   closed under differentiation and keeps evaluation exact on rationals.
//! * Two evaluators: [`Expr::eval`] is checked and reports the offending
//!   subexpression on domain violations; [`CompiledExpr`] resolves named
//!   constants once and evaluates with plain `f64` arithmetic (NaN/inf
//!   propagate) for use inside flow integration and grid sweeps.

use std::fmt;
use std::sync::Arc;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use thiserror::Error;

/// Unary operations. `Neg` is arithmetic; the rest are elementary functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum UnaryOp {
    Neg,
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "-",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sqrt => "sqrt",
        }
    }
}

/// Binary operations. `+` and `*` are the commutative ones; canonicalization
/// orders their children.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn symbol(self) -> char {
        match self {
            BinaryOp::Add => '+',
            BinaryOp::Sub => '-',
            BinaryOp::Mul => '*',
            BinaryOp::Div => '/',
        }
    }

    fn commutative(self) -> bool {
        matches!(self, BinaryOp::Add | BinaryOp::Mul)
    }
}

/// A symbolic expression. The derived `Ord` (variant order, then payload)
/// is the total order used for canonical child ordering.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Expr {
    /// Exact rational constant.
    Num(BigRational),
    /// Named irrational constant declared in an [`IrrationalBasis`].
    Const(String),
    /// Coordinate, indexed into the enclosing system's coordinate list.
    Var(usize),
    Unary(UnaryOp, Arc<Expr>),
    Binary(BinaryOp, Arc<Expr>, Arc<Expr>),
    /// Integer power of a subexpression; the exponent is a literal.
    Pow(Arc<Expr>, i32),
}

impl Expr {
    pub fn num_int(n: i64) -> Expr {
        Expr::Num(BigRational::from_integer(BigInt::from(n)))
    }

    pub fn num_ratio(num: i64, den: i64) -> Expr {
        assert!(den != 0, "rational literal with zero denominator");
        Expr::Num(BigRational::new(BigInt::from(num), BigInt::from(den)))
    }

    pub fn var(i: usize) -> Expr {
        Expr::Var(i)
    }

    pub fn constant(name: &str) -> Expr {
        Expr::Const(name.to_owned())
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Num(r) if r.is_zero())
    }

    pub fn is_one(&self) -> bool {
        matches!(self, Expr::Num(r) if r.is_one())
    }

    /// Largest coordinate index mentioned, plus one.
    pub fn arity(&self) -> usize {
        match self {
            Expr::Num(_) | Expr::Const(_) => 0,
            Expr::Var(i) => i + 1,
            Expr::Unary(_, e) => e.arity(),
            Expr::Binary(_, a, b) => a.arity().max(b.arity()),
            Expr::Pow(b, _) => b.arity(),
        }
    }
}

// ── named irrational constants ──────────────────────────────────────────────

/// A set of named real constants, declared pairwise Q-linearly independent
/// together with 1 (the independence itself is the caller's assertion; it is
/// consumed by the resonance and toric-degree analyses, not re-verified
/// numerically here).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IrrationalBasis {
    entries: Vec<NamedConstant>,
}

/// One named constant with its decimal literal and cached `f64` value.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedConstant {
    pub name: String,
    pub decimal: String,
    pub value: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum BasisError {
    #[error("constant `{0}` declared twice")]
    Duplicate(String),
    #[error("constant `{name}`: `{decimal}` is not a finite number")]
    NotFinite { name: String, decimal: String },
    #[error("`{0}` is not a valid constant name")]
    BadName(String),
}

impl IrrationalBasis {
    pub fn empty() -> Self {
        IrrationalBasis::default()
    }

    /// Declares a constant from a decimal literal. The literal should carry
    /// at least 30 significant digits so that `f64` rounding, not the
    /// declaration, limits downstream accuracy.
    pub fn declare(&mut self, name: &str, decimal: &str) -> Result<(), BasisError> {
        if !is_ident(name) || RESERVED.contains(&name) {
            return Err(BasisError::BadName(name.to_owned()));
        }
        if self.entries.iter().any(|c| c.name == name) {
            return Err(BasisError::Duplicate(name.to_owned()));
        }
        let value: f64 = decimal.trim().parse().map_err(|_| BasisError::NotFinite {
            name: name.to_owned(),
            decimal: decimal.to_owned(),
        })?;
        if !value.is_finite() {
            return Err(BasisError::NotFinite {
                name: name.to_owned(),
                decimal: decimal.to_owned(),
            });
        }
        self.entries.push(NamedConstant {
            name: name.to_owned(),
            decimal: decimal.trim().to_owned(),
            value,
        });
        Ok(())
    }

    pub fn value_of(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|c| c.name == name).map(|c| c.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|c| c.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|c| c.name.as_str())
    }

    pub fn entries(&self) -> &[NamedConstant] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

// ── canonicalization ────────────────────────────────────────────────────────

/// Ordering of the terms of a commutative chain. Sums keep literals last
/// (`x+10`), products keep them first (`3/4*x`); within a class the derived
/// structural order decides. Shared by [`canonical`] and [`simplify`] so
/// both produce the same arrangement.
fn cmp_chain_terms(op: BinaryOp, a: &Expr, b: &Expr) -> std::cmp::Ordering {
    let (na, nb) = (matches!(a, Expr::Num(_)), matches!(b, Expr::Num(_)));
    if na != nb {
        let literal_first = op == BinaryOp::Mul;
        return if na == literal_first {
            std::cmp::Ordering::Less
        } else {
            std::cmp::Ordering::Greater
        };
    }
    a.cmp(b)
}

/// Splits nested applications of one commutative operation into its terms.
fn split_chain(op: BinaryOp, e: Expr, out: &mut Vec<Expr>) {
    match e {
        Expr::Binary(o, a, b) if o == op => {
            split_chain(op, (*a).clone(), out);
            split_chain(op, (*b).clone(), out);
        }
        other => out.push(other),
    }
}

fn join_chain(op: BinaryOp, terms: Vec<Expr>) -> Expr {
    terms
        .into_iter()
        .reduce(|l, r| Expr::Binary(op, Arc::new(l), Arc::new(r)))
        .expect("chain is nonempty")
}

/// Canonical form: `+`/`*` chains flattened and their terms ordered under
/// [`cmp_chain_terms`], `-(literal)` folded into the literal, and literal
/// fractions folded into a single rational. No other rewriting.
pub fn canonical(e: &Expr) -> Expr {
    match e {
        Expr::Num(_) | Expr::Const(_) | Expr::Var(_) => e.clone(),
        Expr::Unary(op, a) => {
            let a = canonical(a);
            if let (UnaryOp::Neg, Expr::Num(r)) = (*op, &a) {
                return Expr::Num(-r.clone());
            }
            Expr::Unary(*op, Arc::new(a))
        }
        Expr::Binary(op, a, b) => {
            let a = canonical(a);
            let b = canonical(b);
            if let (BinaryOp::Div, Expr::Num(p), Expr::Num(q)) = (*op, &a, &b) {
                if !q.is_zero() {
                    return Expr::Num(p / q);
                }
            }
            if op.commutative() {
                let mut terms = Vec::new();
                split_chain(*op, a, &mut terms);
                split_chain(*op, b, &mut terms);
                terms.sort_by(|x, y| cmp_chain_terms(*op, x, y));
                join_chain(*op, terms)
            } else {
                Expr::Binary(*op, Arc::new(a), Arc::new(b))
            }
        }
        Expr::Pow(b, k) => Expr::Pow(Arc::new(canonical(b)), *k),
    }
}

// ── folding constructors ────────────────────────────────────────────────────
//
// Used by `diff` and `simplify`. Each applies exact constant folding and the
// 0/1 identities and nothing else. `0/e -> 0` and `e^0 -> 1` follow the usual
// convention of ignoring the removable domain point.

pub fn fold_neg(a: Expr) -> Expr {
    match a {
        Expr::Num(r) => Expr::Num(-r),
        Expr::Unary(UnaryOp::Neg, inner) => (*inner).clone(),
        other => Expr::Unary(UnaryOp::Neg, Arc::new(other)),
    }
}

pub fn fold_add(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(p), Expr::Num(q)) => return Expr::Num(p + q),
        (Expr::Num(p), _) if p.is_zero() => return b,
        (_, Expr::Num(q)) if q.is_zero() => return a,
        _ => {}
    }
    Expr::Binary(BinaryOp::Add, Arc::new(a), Arc::new(b))
}

pub fn fold_sub(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(p), Expr::Num(q)) => return Expr::Num(p - q),
        (_, Expr::Num(q)) if q.is_zero() => return a,
        (Expr::Num(p), _) if p.is_zero() => return fold_neg(b),
        _ => {}
    }
    Expr::Binary(BinaryOp::Sub, Arc::new(a), Arc::new(b))
}

pub fn fold_mul(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(p), Expr::Num(q)) => return Expr::Num(p * q),
        (Expr::Num(p), _) if p.is_zero() => return Expr::num_int(0),
        (_, Expr::Num(q)) if q.is_zero() => return Expr::num_int(0),
        (Expr::Num(p), _) if p.is_one() => return b,
        (_, Expr::Num(q)) if q.is_one() => return a,
        (Expr::Num(p), _) if is_minus_one(p) => return fold_neg(b),
        (_, Expr::Num(q)) if is_minus_one(q) => return fold_neg(a),
        _ => {}
    }
    Expr::Binary(BinaryOp::Mul, Arc::new(a), Arc::new(b))
}

fn is_minus_one(r: &BigRational) -> bool {
    r.is_integer() && (-r).is_one()
}

pub fn fold_div(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(p), Expr::Num(q)) if !q.is_zero() => return Expr::Num(p / q),
        (_, Expr::Num(q)) if q.is_one() => return a,
        (Expr::Num(p), b2) if p.is_zero() && !matches!(b2, Expr::Num(q) if q.is_zero()) => {
            return Expr::num_int(0)
        }
        _ => {}
    }
    // Constant denominators commute past a leading constant factor; this is
    // still constant folding (no symbolic terms move).
    if let (Expr::Binary(BinaryOp::Mul, x, y), Expr::Num(q)) = (&a, &b) {
        if !q.is_zero() {
            if let Expr::Num(p) = x.as_ref() {
                return fold_mul(Expr::Num(p / q), (**y).clone());
            }
            if let Expr::Num(p) = y.as_ref() {
                return fold_mul(Expr::Num(p / q), (**x).clone());
            }
        }
    }
    Expr::Binary(BinaryOp::Div, Arc::new(a), Arc::new(b))
}

pub fn fold_pow(a: Expr, k: i32) -> Expr {
    if k == 0 {
        return Expr::num_int(1);
    }
    if k == 1 {
        return a;
    }
    if let Expr::Num(r) = &a {
        if !r.is_zero() || k > 0 {
            return Expr::Num(rational_pow(r, k));
        }
    }
    Expr::Pow(Arc::new(a), k)
}

fn rational_pow(r: &BigRational, k: i32) -> BigRational {
    let mag = r.pow(k.unsigned_abs() as u32 as i32);
    if k < 0 {
        mag.recip()
    } else {
        mag
    }
}

fn fold_unary(op: UnaryOp, a: Expr) -> Expr {
    if let Expr::Num(r) = &a {
        match op {
            UnaryOp::Neg => return Expr::Num(-r.clone()),
            UnaryOp::Sin if r.is_zero() => return Expr::num_int(0),
            UnaryOp::Cos if r.is_zero() => return Expr::num_int(1),
            UnaryOp::Exp if r.is_zero() => return Expr::num_int(1),
            UnaryOp::Log if r.is_one() => return Expr::num_int(0),
            UnaryOp::Sqrt => {
                if let Some(root) = rational_sqrt(r) {
                    return Expr::Num(root);
                }
            }
            _ => {}
        }
    }
    if op == UnaryOp::Neg {
        return fold_neg(a);
    }
    Expr::Unary(op, Arc::new(a))
}

fn rational_sqrt(r: &BigRational) -> Option<BigRational> {
    if r.is_negative() {
        return None;
    }
    let num = r.numer().sqrt();
    let den = r.denom().sqrt();
    if &(&num * &num) == r.numer() && &(&den * &den) == r.denom() {
        Some(BigRational::new(num, den))
    } else {
        None
    }
}

/// Recursive constant folding plus 0/1 identities, bottom-up. Literals in a
/// `+` or `*` chain combine across nesting (`2+(x+8)` is `x+10`); symbolic
/// terms are ordered but never merged.
pub fn simplify(e: &Expr) -> Expr {
    match e {
        Expr::Num(_) | Expr::Const(_) | Expr::Var(_) => e.clone(),
        Expr::Unary(op, a) => fold_unary(*op, simplify(a)),
        Expr::Binary(op, a, b) => {
            let (a, b) = (simplify(a), simplify(b));
            match op {
                BinaryOp::Add => simplify_sum(a, b),
                BinaryOp::Sub => fold_sub(a, b),
                BinaryOp::Mul => simplify_product(a, b),
                BinaryOp::Div => fold_div(a, b),
            }
        }
        Expr::Pow(b, k) => fold_pow(simplify(b), *k),
    }
}

fn simplify_sum(a: Expr, b: Expr) -> Expr {
    let mut lit = BigRational::zero();
    let mut terms = Vec::new();
    collect_sum(a, &mut lit, &mut terms);
    collect_sum(b, &mut lit, &mut terms);
    terms.sort_by(|x, y| cmp_chain_terms(BinaryOp::Add, x, y));
    let Some(chain) = terms
        .into_iter()
        .reduce(|l, r| Expr::Binary(BinaryOp::Add, Arc::new(l), Arc::new(r)))
    else {
        return Expr::Num(lit);
    };
    if lit.is_zero() {
        chain
    } else if lit.is_negative() {
        Expr::Binary(BinaryOp::Sub, Arc::new(chain), Arc::new(Expr::Num(-lit)))
    } else {
        Expr::Binary(BinaryOp::Add, Arc::new(chain), Arc::new(Expr::Num(lit)))
    }
}

fn collect_sum(e: Expr, lit: &mut BigRational, out: &mut Vec<Expr>) {
    match e {
        Expr::Num(r) => *lit += r,
        Expr::Binary(BinaryOp::Add, a, b) => {
            collect_sum((*a).clone(), lit, out);
            collect_sum((*b).clone(), lit, out);
        }
        Expr::Binary(BinaryOp::Sub, a, b) if matches!(b.as_ref(), Expr::Num(_)) => {
            if let Expr::Num(r) = b.as_ref() {
                *lit -= r;
            }
            collect_sum((*a).clone(), lit, out);
        }
        other => out.push(other),
    }
}

fn simplify_product(a: Expr, b: Expr) -> Expr {
    let mut lit = BigRational::one();
    let mut factors = Vec::new();
    collect_product(a, &mut lit, &mut factors);
    collect_product(b, &mut lit, &mut factors);
    if lit.is_zero() {
        return Expr::num_int(0);
    }
    factors.sort_by(|x, y| cmp_chain_terms(BinaryOp::Mul, x, y));
    if factors.is_empty() {
        return Expr::Num(lit);
    }
    let negate = is_minus_one(&lit);
    if !lit.is_one() && !negate {
        // Coefficient leads, matching canonical chain order.
        factors.insert(0, Expr::Num(lit));
    }
    let chain = factors
        .into_iter()
        .reduce(|l, r| Expr::Binary(BinaryOp::Mul, Arc::new(l), Arc::new(r)))
        .expect("nonempty");
    if negate {
        fold_neg(chain)
    } else {
        chain
    }
}

fn collect_product(e: Expr, lit: &mut BigRational, out: &mut Vec<Expr>) {
    match e {
        Expr::Num(r) => *lit *= r,
        Expr::Binary(BinaryOp::Mul, a, b) => {
            collect_product((*a).clone(), lit, out);
            collect_product((*b).clone(), lit, out);
        }
        other => out.push(other),
    }
}

// ── differentiation ─────────────────────────────────────────────────────────

/// Exact partial derivative with respect to coordinate `var`, folded by the
/// constructors above.
pub fn diff_expr(e: &Expr, var: usize) -> Expr {
    match e {
        Expr::Num(_) | Expr::Const(_) => Expr::num_int(0),
        Expr::Var(i) => Expr::num_int(if *i == var { 1 } else { 0 }),
        Expr::Unary(op, a) => {
            let da = diff_expr(a, var);
            let a = (**a).clone();
            match op {
                UnaryOp::Neg => fold_neg(da),
                UnaryOp::Sin => fold_mul(Expr::Unary(UnaryOp::Cos, Arc::new(a)), da),
                UnaryOp::Cos => fold_mul(fold_neg(Expr::Unary(UnaryOp::Sin, Arc::new(a))), da),
                UnaryOp::Exp => fold_mul(Expr::Unary(UnaryOp::Exp, Arc::new(a)), da),
                UnaryOp::Log => fold_div(da, a),
                UnaryOp::Sqrt => fold_div(
                    da,
                    fold_mul(Expr::num_int(2), Expr::Unary(UnaryOp::Sqrt, Arc::new(a))),
                ),
            }
        }
        Expr::Binary(op, a, b) => {
            let (da, db) = (diff_expr(a, var), diff_expr(b, var));
            let (a, b) = ((**a).clone(), (**b).clone());
            match op {
                BinaryOp::Add => fold_add(da, db),
                BinaryOp::Sub => fold_sub(da, db),
                BinaryOp::Mul => fold_add(fold_mul(da, b), fold_mul(a, db)),
                BinaryOp::Div => {
                    if matches!(b, Expr::Num(_)) {
                        fold_div(da, b)
                    } else {
                        fold_div(
                            fold_sub(fold_mul(da, b.clone()), fold_mul(a, db)),
                            fold_pow(b, 2),
                        )
                    }
                }
            }
        }
        Expr::Pow(b, k) => {
            let db = diff_expr(b, var);
            fold_mul(
                Expr::num_int(*k as i64),
                fold_mul(fold_pow((**b).clone(), k - 1), db),
            )
        }
    }
}

// ── printing ────────────────────────────────────────────────────────────────

// Precedence levels used by the printer: looser binds lower.
const PREC_ADD: u8 = 1;
const PREC_MUL: u8 = 2;
const PREC_NEG: u8 = 3;
const PREC_POW: u8 = 4;
const PREC_ATOM: u8 = 5;

/// Prints the canonical form of `e` with coordinate names from `names`.
/// The output reparses to `canonical(e)` and is byte-stable, which makes it
/// suitable as a serialization format in reports.
pub fn print_expr(e: &Expr, names: &[String]) -> String {
    let mut out = String::new();
    emit(&canonical(e), names, 0, &mut out);
    out
}

fn precedence(e: &Expr) -> u8 {
    match e {
        Expr::Num(r) => {
            if r.is_negative() {
                if r.is_integer() {
                    PREC_NEG
                } else {
                    PREC_MUL
                }
            } else if r.is_integer() {
                PREC_ATOM
            } else {
                PREC_MUL
            }
        }
        Expr::Const(_) | Expr::Var(_) => PREC_ATOM,
        Expr::Unary(UnaryOp::Neg, _) => PREC_NEG,
        Expr::Unary(..) => PREC_ATOM,
        Expr::Binary(BinaryOp::Add | BinaryOp::Sub, ..) => PREC_ADD,
        Expr::Binary(BinaryOp::Mul | BinaryOp::Div, ..) => PREC_MUL,
        Expr::Pow(..) => PREC_POW,
    }
}

fn emit(e: &Expr, names: &[String], min_prec: u8, out: &mut String) {
    let prec = precedence(e);
    let parens = prec < min_prec;
    if parens {
        out.push('(');
    }
    match e {
        Expr::Num(r) => {
            out.push_str(&r.to_string());
        }
        Expr::Const(name) => out.push_str(name),
        Expr::Var(i) => match names.get(*i) {
            Some(n) => out.push_str(n),
            None => out.push_str(&format!("x{}", i + 1)),
        },
        Expr::Unary(UnaryOp::Neg, a) => {
            out.push('-');
            emit(a, names, PREC_NEG, out);
        }
        Expr::Unary(op, a) => {
            out.push_str(op.name());
            out.push('(');
            emit(a, names, 0, out);
            out.push(')');
        }
        Expr::Binary(op, a, b) => {
            emit(a, names, prec, out);
            out.push(op.symbol());
            emit(b, names, prec + 1, out);
        }
        Expr::Pow(b, k) => {
            emit(b, names, PREC_ATOM, out);
            out.push('^');
            if *k < 0 {
                out.push_str(&format!("({})", k));
            } else {
                out.push_str(&k.to_string());
            }
        }
    }
    if parens {
        out.push(')');
    }
}

/// Formats with placeholder coordinate names `x1, x2, ...`; used in error
/// messages where the coordinate list is not at hand.
pub fn print_expr_generic(e: &Expr) -> String {
    print_expr(e, &[])
}

// ── parsing ─────────────────────────────────────────────────────────────────

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("exponent at byte {offset} is not an integer literal")]
    NonIntegerExponent { offset: usize },
}

const RESERVED: &[&str] = &["sin", "cos", "exp", "log", "sqrt"];

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num { value: BigRational, integer: bool },
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            src: src.as_bytes(),
            pos: 0,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn next_tok(&mut self) -> Result<Option<(Tok, usize)>, ParseError> {
        self.skip_ws();
        if self.pos >= self.src.len() {
            return Ok(None);
        }
        let start = self.pos;
        let c = self.src[self.pos];
        let tok = match c {
            b'+' => {
                self.pos += 1;
                Tok::Plus
            }
            b'-' => {
                self.pos += 1;
                Tok::Minus
            }
            b'*' => {
                self.pos += 1;
                Tok::Star
            }
            b'/' => {
                self.pos += 1;
                Tok::Slash
            }
            b'^' => {
                self.pos += 1;
                Tok::Caret
            }
            b'(' => {
                self.pos += 1;
                Tok::LParen
            }
            b')' => {
                self.pos += 1;
                Tok::RParen
            }
            b'0'..=b'9' | b'.' => self.lex_number(start)?,
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while self.pos < self.src.len()
                    && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
                {
                    self.pos += 1;
                }
                Tok::Ident(String::from_utf8_lossy(&self.src[start..self.pos]).into_owned())
            }
            other => {
                return Err(ParseError::Syntax {
                    offset: start,
                    message: format!("unexpected character `{}`", other as char),
                })
            }
        };
        Ok(Some((tok, start)))
    }

    fn lex_number(&mut self, start: usize) -> Result<Tok, ParseError> {
        let mut saw_digit = false;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            saw_digit = true;
            self.pos += 1;
        }
        let int_end = self.pos;
        let mut frac: Option<(usize, usize)> = None;
        if self.pos < self.src.len() && self.src[self.pos] == b'.' {
            self.pos += 1;
            let frac_start = self.pos;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                saw_digit = true;
                self.pos += 1;
            }
            frac = Some((frac_start, self.pos));
        }
        if !saw_digit {
            return Err(ParseError::Syntax {
                offset: start,
                message: "malformed number".into(),
            });
        }
        let int_part: BigInt = if start == int_end {
            BigInt::from(0)
        } else {
            std::str::from_utf8(&self.src[start..int_end])
                .unwrap()
                .parse()
                .unwrap()
        };
        let mut value = BigRational::from_integer(int_part);
        let mut integer = true;
        if let Some((fs, fe)) = frac {
            integer = false;
            if fs < fe {
                let digits: BigInt = std::str::from_utf8(&self.src[fs..fe]).unwrap().parse().unwrap();
                let scale = BigInt::from(10).pow((fe - fs) as u32);
                value += BigRational::new(digits, scale);
            }
        }
        Ok(Tok::Num { value, integer })
    }
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    idx: usize,
    end: usize,
    vars: &'a [String],
    consts: &'a [String],
}

/// Parses `source` against the coordinate names `vars` and the declared
/// irrational constant names `consts`.
pub fn parse_expr_with(source: &str, vars: &[String], consts: &[String]) -> Result<Expr, ParseError> {
    let mut lexer = Lexer::new(source);
    let mut toks = Vec::new();
    while let Some(t) = lexer.next_tok()? {
        toks.push(t);
    }
    let mut p = Parser {
        toks,
        idx: 0,
        end: source.len(),
        vars,
        consts,
    };
    let e = p.parse_sum()?;
    if let Some((_, off)) = p.peek() {
        return Err(ParseError::Syntax {
            offset: off,
            message: "trailing input".into(),
        });
    }
    Ok(e)
}

/// Parses with coordinates only (no named constants declared).
pub fn parse_expr(source: &str, vars: &[String]) -> Result<Expr, ParseError> {
    parse_expr_with(source, vars, &[])
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<(&Tok, usize)> {
        self.toks.get(self.idx).map(|(t, o)| (t, *o))
    }

    fn bump(&mut self) -> Option<(Tok, usize)> {
        let t = self.toks.get(self.idx).cloned();
        if t.is_some() {
            self.idx += 1;
        }
        t
    }

    fn here(&self) -> usize {
        self.peek().map(|(_, o)| o).unwrap_or(self.end)
    }

    fn expect_rparen(&mut self) -> Result<(), ParseError> {
        match self.bump() {
            Some((Tok::RParen, _)) => Ok(()),
            other => Err(ParseError::Syntax {
                offset: other.map(|(_, o)| o).unwrap_or(self.end),
                message: "expected `)`".into(),
            }),
        }
    }

    fn parse_sum(&mut self) -> Result<Expr, ParseError> {
        let mut acc = self.parse_term()?;
        while let Some((tok, _)) = self.peek() {
            let op = match tok {
                Tok::Plus => BinaryOp::Add,
                Tok::Minus => BinaryOp::Sub,
                _ => break,
            };
            self.bump();
            let rhs = self.parse_term()?;
            acc = Expr::Binary(op, Arc::new(acc), Arc::new(rhs));
        }
        Ok(acc)
    }

    fn parse_term(&mut self) -> Result<Expr, ParseError> {
        let mut acc = self.parse_unary()?;
        while let Some((tok, _)) = self.peek() {
            let op = match tok {
                Tok::Star => BinaryOp::Mul,
                Tok::Slash => BinaryOp::Div,
                _ => break,
            };
            self.bump();
            let rhs = self.parse_unary()?;
            acc = match (op, &acc, &rhs) {
                // A literal fraction is a single exact rational, matching the
                // canonical printer's `p/q` output.
                (BinaryOp::Div, Expr::Num(p), Expr::Num(q)) if !q.is_zero() => Expr::Num(p / q),
                _ => Expr::Binary(op, Arc::new(acc), Arc::new(rhs)),
            };
        }
        Ok(acc)
    }

    fn parse_unary(&mut self) -> Result<Expr, ParseError> {
        if let Some((Tok::Minus, _)) = self.peek() {
            self.bump();
            let inner = self.parse_unary()?;
            return Ok(match inner {
                Expr::Num(r) => Expr::Num(-r),
                other => Expr::Unary(UnaryOp::Neg, Arc::new(other)),
            });
        }
        self.parse_power()
    }

    fn parse_power(&mut self) -> Result<Expr, ParseError> {
        let base = self.parse_atom()?;
        if let Some((Tok::Caret, _)) = self.peek() {
            self.bump();
            let k = self.parse_exponent()?;
            return Ok(Expr::Pow(Arc::new(base), k));
        }
        Ok(base)
    }

    fn parse_exponent(&mut self) -> Result<i32, ParseError> {
        let off = self.here();
        let mut parens = false;
        if let Some((Tok::LParen, _)) = self.peek() {
            self.bump();
            parens = true;
        }
        let mut negate = false;
        if let Some((Tok::Minus, _)) = self.peek() {
            self.bump();
            negate = true;
        }
        let value = match self.bump() {
            Some((Tok::Num { value, integer: true }, noff)) => {
                match value.to_integer().to_i32() {
                    Some(v) => v,
                    None => {
                        return Err(ParseError::Syntax {
                            offset: noff,
                            message: "exponent out of range".into(),
                        })
                    }
                }
            }
            _ => return Err(ParseError::NonIntegerExponent { offset: off }),
        };
        if parens {
            if !matches!(self.peek(), Some((Tok::RParen, _))) {
                return Err(ParseError::NonIntegerExponent { offset: off });
            }
            self.bump();
        }
        Ok(if negate { -value } else { value })
    }

    fn parse_atom(&mut self) -> Result<Expr, ParseError> {
        match self.bump() {
            Some((Tok::Num { value, .. }, _)) => Ok(Expr::Num(value)),
            Some((Tok::LParen, _)) => {
                let e = self.parse_sum()?;
                self.expect_rparen()?;
                Ok(e)
            }
            Some((Tok::Ident(name), off)) => {
                if let Some(op) = function_op(&name) {
                    match self.bump() {
                        Some((Tok::LParen, _)) => {}
                        other => {
                            return Err(ParseError::Syntax {
                                offset: other.map(|(_, o)| o).unwrap_or(self.end),
                                message: format!("`{}` requires a parenthesized argument", name),
                            })
                        }
                    }
                    let arg = self.parse_sum()?;
                    self.expect_rparen()?;
                    return Ok(Expr::Unary(op, Arc::new(arg)));
                }
                if let Some(i) = self.vars.iter().position(|v| v == &name) {
                    return Ok(Expr::Var(i));
                }
                if self.consts.iter().any(|c| c == &name) {
                    return Ok(Expr::Const(name));
                }
                Err(ParseError::UnknownIdentifier { name, offset: off })
            }
            other => Err(ParseError::Syntax {
                offset: other.map(|(_, o)| o).unwrap_or(self.end),
                message: "expected expression".into(),
            }),
        }
    }
}

fn function_op(name: &str) -> Option<UnaryOp> {
    match name {
        "sin" => Some(UnaryOp::Sin),
        "cos" => Some(UnaryOp::Cos),
        "exp" => Some(UnaryOp::Exp),
        "log" => Some(UnaryOp::Log),
        "sqrt" => Some(UnaryOp::Sqrt),
        _ => None,
    }
}

// ── evaluation ──────────────────────────────────────────────────────────────

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("division by zero in `{0}`")]
    DivisionByZero(String),
    #[error("log of non-positive value in `{0}`")]
    LogDomain(String),
    #[error("square root of negative value in `{0}`")]
    SqrtDomain(String),
    #[error("zero base with negative exponent in `{0}`")]
    ZeroToNegative(String),
    #[error("non-finite result in `{0}`")]
    NonFinite(String),
    #[error("coordinate index {0} out of range for point of dimension {1}")]
    BadVar(usize, usize),
    #[error("constant `{0}` is not declared")]
    UnknownConstant(String),
}

impl Expr {
    /// Checked evaluation at `point`, resolving named constants through
    /// `basis`. Domain violations report the offending subexpression.
    pub fn eval(&self, point: &[f64], basis: &IrrationalBasis) -> Result<f64, EvalError> {
        let v = match self {
            Expr::Num(r) => rational_to_f64(r),
            Expr::Const(name) => basis
                .value_of(name)
                .ok_or_else(|| EvalError::UnknownConstant(name.clone()))?,
            Expr::Var(i) => *point
                .get(*i)
                .ok_or(EvalError::BadVar(*i, point.len()))?,
            Expr::Unary(op, a) => {
                let x = a.eval(point, basis)?;
                match op {
                    UnaryOp::Neg => -x,
                    UnaryOp::Sin => x.sin(),
                    UnaryOp::Cos => x.cos(),
                    UnaryOp::Exp => x.exp(),
                    UnaryOp::Log => {
                        if x <= 0.0 {
                            return Err(EvalError::LogDomain(print_expr_generic(self)));
                        }
                        x.ln()
                    }
                    UnaryOp::Sqrt => {
                        if x < 0.0 {
                            return Err(EvalError::SqrtDomain(print_expr_generic(self)));
                        }
                        x.sqrt()
                    }
                }
            }
            Expr::Binary(op, a, b) => {
                let (x, y) = (a.eval(point, basis)?, b.eval(point, basis)?);
                match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                    BinaryOp::Div => {
                        if y == 0.0 {
                            return Err(EvalError::DivisionByZero(print_expr_generic(self)));
                        }
                        x / y
                    }
                }
            }
            Expr::Pow(b, k) => {
                let x = b.eval(point, basis)?;
                if x == 0.0 && *k < 0 {
                    return Err(EvalError::ZeroToNegative(print_expr_generic(self)));
                }
                x.powi(*k)
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite(print_expr_generic(self)))
        }
    }

    /// Resolves named constants once and drops exact rationals to `f64` for
    /// repeated evaluation in inner loops.
    pub fn compile(&self, basis: &IrrationalBasis) -> Result<CompiledExpr, EvalError> {
        Ok(match self {
            Expr::Num(r) => CompiledExpr::Num(rational_to_f64(r)),
            Expr::Const(name) => CompiledExpr::Num(
                basis
                    .value_of(name)
                    .ok_or_else(|| EvalError::UnknownConstant(name.clone()))?,
            ),
            Expr::Var(i) => CompiledExpr::Var(*i),
            Expr::Unary(op, a) => CompiledExpr::Unary(*op, Box::new(a.compile(basis)?)),
            Expr::Binary(op, a, b) => CompiledExpr::Binary(
                *op,
                Box::new(a.compile(basis)?),
                Box::new(b.compile(basis)?),
            ),
            Expr::Pow(b, k) => CompiledExpr::Pow(Box::new(b.compile(basis)?), *k),
        })
    }
}

/// Exact-to-float conversion; falls back to the `BigRational` conversion for
/// values outside the `i64` fast path.
fn rational_to_f64(r: &BigRational) -> f64 {
    if let (Some(n), Some(d)) = (r.numer().to_i64(), r.denom().to_i64()) {
        n as f64 / d as f64
    } else {
        r.to_f64().unwrap_or(f64::NAN)
    }
}

/// Evaluation form with all constants resolved to `f64`. Domain violations
/// surface as NaN/inf; callers in flow integration treat non-finite states
/// as a domain exit.
#[derive(Clone, Debug)]
pub enum CompiledExpr {
    Num(f64),
    Var(usize),
    Unary(UnaryOp, Box<CompiledExpr>),
    Binary(BinaryOp, Box<CompiledExpr>, Box<CompiledExpr>),
    Pow(Box<CompiledExpr>, i32),
}

impl CompiledExpr {
    pub fn eval(&self, point: &[f64]) -> f64 {
        match self {
            CompiledExpr::Num(v) => *v,
            CompiledExpr::Var(i) => point[*i],
            CompiledExpr::Unary(op, a) => {
                let x = a.eval(point);
                match op {
                    UnaryOp::Neg => -x,
                    UnaryOp::Sin => x.sin(),
                    UnaryOp::Cos => x.cos(),
                    UnaryOp::Exp => x.exp(),
                    UnaryOp::Log => x.ln(),
                    UnaryOp::Sqrt => x.sqrt(),
                }
            }
            CompiledExpr::Binary(op, a, b) => {
                let (x, y) = (a.eval(point), b.eval(point));
                match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                    BinaryOp::Div => x / y,
                }
            }
            CompiledExpr::Pow(b, k) => b.eval(point).powi(*k),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&print_expr_generic(self))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coords(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn parse(src: &str, names: &[&str]) -> Expr {
        parse_expr(src, &coords(names)).unwrap()
    }

    #[test]
    fn parse_precedence_and_structure() {
        let v = coords(&["x", "y"]);
        let e = parse_expr("x + y*x^2", &v).unwrap();
        let expected = Expr::Binary(
            BinaryOp::Add,
            Arc::new(Expr::Var(0)),
            Arc::new(Expr::Binary(
                BinaryOp::Mul,
                Arc::new(Expr::Var(1)),
                Arc::new(Expr::Pow(Arc::new(Expr::Var(0)), 2)),
            )),
        );
        assert_eq!(e, expected);
    }

    #[test]
    fn parse_decimal_is_exact() {
        let e = parse("0.125", &[]);
        assert_eq!(e, Expr::num_ratio(1, 8));
    }

    #[test]
    fn parse_literal_fraction_folds() {
        assert_eq!(parse("3/4", &[]), Expr::num_ratio(3, 4));
        assert_eq!(parse("-3/4", &[]), Expr::num_ratio(-3, 4));
        // A symbolic denominator stays a division node.
        let e = parse("3/x", &["x"]);
        assert!(matches!(e, Expr::Binary(BinaryOp::Div, _, _)));
    }

    #[test]
    fn parse_rejects_fractional_exponent() {
        let err = parse_expr("x^(1/2)", &coords(&["x"])).unwrap_err();
        assert!(matches!(err, ParseError::NonIntegerExponent { .. }));
        let err = parse_expr("x^y", &coords(&["x", "y"])).unwrap_err();
        assert!(matches!(err, ParseError::NonIntegerExponent { .. }));
    }

    #[test]
    fn parse_reports_unknown_identifier() {
        let err = parse_expr("x + omega", &coords(&["x"])).unwrap_err();
        assert_eq!(
            err,
            ParseError::UnknownIdentifier {
                name: "omega".into(),
                offset: 4
            }
        );
    }

    #[test]
    fn parse_syntax_error_offset() {
        let err = parse_expr("x + + y", &coords(&["x", "y"])).unwrap_err();
        match err {
            ParseError::Syntax { offset, .. } => assert_eq!(offset, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn diff_polynomial_fraction() {
        // d/dx (x^2 + y^2)/2 = x
        let v = coords(&["x", "y"]);
        let e = parse_expr("(x^2 + y^2)/2", &v).unwrap();
        assert_eq!(diff_expr(&e, 0), Expr::Var(0));
    }

    #[test]
    fn diff_pendulum_hamiltonian() {
        // d/dq (p^2/2 - cos q) = sin q
        let v = coords(&["q", "p"]);
        let e = parse_expr("p^2/2 - cos(q)", &v).unwrap();
        assert_eq!(
            diff_expr(&e, 0),
            Expr::Unary(UnaryOp::Sin, Arc::new(Expr::Var(0)))
        );
    }

    #[test]
    fn canonical_orders_commutative_children() {
        let v = coords(&["x", "y"]);
        let a = parse_expr("y + x", &v).unwrap();
        let b = parse_expr("x + y", &v).unwrap();
        assert_ne!(a, b);
        assert_eq!(canonical(&a), canonical(&b));
    }

    #[test]
    fn print_roundtrip_examples() {
        let v = coords(&["x", "y"]);
        for src in [
            "x + y",
            "x - (y - x)",
            "2*(x + y)^3",
            "sin(x)*cos(y)",
            "x^(-2)",
            "3/4*x",
            "-x^2",
            "sqrt(x^2 + 1)",
            "x/(y*y)",
            "1/3 + x",
        ] {
            let e = parse_expr(src, &v).unwrap();
            let printed = print_expr(&e, &v);
            let back = parse_expr(&printed, &v).unwrap();
            assert_eq!(back, canonical(&e), "roundtrip failed for `{src}` -> `{printed}`");
        }
    }

    #[test]
    fn eval_reports_domain_errors() {
        let v = coords(&["x"]);
        let basis = IrrationalBasis::empty();
        let e = parse_expr("1/x", &v).unwrap();
        assert!(matches!(
            e.eval(&[0.0], &basis),
            Err(EvalError::DivisionByZero(_))
        ));
        let e = parse_expr("log(x)", &v).unwrap();
        assert!(matches!(e.eval(&[-1.0], &basis), Err(EvalError::LogDomain(_))));
        let e = parse_expr("sqrt(x)", &v).unwrap();
        assert!(matches!(e.eval(&[-1.0], &basis), Err(EvalError::SqrtDomain(_))));
    }

    #[test]
    fn eval_resolves_declared_constants() {
        let mut basis = IrrationalBasis::empty();
        basis
            .declare("sqrt2", "1.41421356237309504880168872420969808")
            .unwrap();
        let e = parse_expr_with("sqrt2*x", &coords(&["x"]), &["sqrt2".into()]).unwrap();
        let y = e.eval(&[2.0], &basis).unwrap();
        assert!((y - 2.0 * std::f64::consts::SQRT_2).abs() < 1e-15);
        let compiled = e.compile(&basis).unwrap();
        assert_eq!(compiled.eval(&[2.0]), y);
    }

    #[test]
    fn basis_rejects_duplicates_and_nonfinite() {
        let mut basis = IrrationalBasis::empty();
        basis.declare("a", "1.0").unwrap();
        assert_eq!(basis.declare("a", "2.0"), Err(BasisError::Duplicate("a".into())));
        assert!(matches!(
            basis.declare("b", "not-a-number"),
            Err(BasisError::NotFinite { .. })
        ));
        assert!(matches!(basis.declare("sin", "1.0"), Err(BasisError::BadName(_))));
    }

    #[test]
    fn simplify_folds_constants_only() {
        let v = coords(&["x"]);
        let e = parse_expr("0*x + 1*x + 2^3 + sqrt(4)", &v).unwrap();
        let s = simplify(&e);
        assert_eq!(print_expr(&s, &v), "x+10");
        // No general rewriting: x + x stays a sum.
        let e = parse_expr("x + x", &v).unwrap();
        assert_eq!(simplify(&e), e);
    }

    #[test]
    fn pow_zero_and_negative() {
        let v = coords(&["x"]);
        let e = parse_expr("x^0", &v).unwrap();
        assert_eq!(simplify(&e), Expr::num_int(1));
        let e = parse_expr("2^(-2)", &v).unwrap();
        assert_eq!(simplify(&e), Expr::num_ratio(1, 4));
    }
}
