//! Exact normal forms of formal vector fields near an equilibrium:
//! semisimple/nilpotent splitting, homological solves, resonance lattices.
//!
//! Everything here is exact: coefficients live in a declared [`NumberField`]
//! and resonance — a Q-linear-algebra question — is decided by coordinate
//! comparison, never by floating point. The engine splits the linear part
//! `A = S + N` by Newton iteration on the squarefree part of the
//! characteristic polynomial, reads off eigenvalues (triangular matrices
//! directly, rational characteristic polynomials by factoring with
//! square roots searched inside the field), and then removes nonresonant
//! monomials degree by degree with Lie transforms `exp(ad_G)`.
//!
//! The homological operator at degree `r` is `ad_A = ad_S + ad_N` with
//! `ad_S` diagonal on monomials (eigenvalue `⟨γ,k⟩ − γ_j`) and `ad_N`
//! nilpotent and commuting with it, so its inverse on the nonresonant
//! subspace is the finite sum `Σ_s (−D⁻¹M)^s D⁻¹`. Resonant monomials are
//! never divided by anything, so small denominators cannot occur; what
//! survives commutes with `S` exactly, coefficients identically zero —
//! that is checked after every degree step. With `N ≠ 0` the survivors may
//! still couple to `N`; the result is flagged, not rejected.
//!
//! The Hamiltonian (Birkhoff) path conjugates an elliptic quadratic part
//! `Σ ω_j (x_j²+y_j²)/2` into complex canonical coordinates
//! `ζ_j = x_j + i y_j`, `η_j = (i x_j + y_j)/2` (so `{ζ_j, η_j} = 1` and
//! `H₂ = Σ −iω_j ζ_jη_j`), normalizes there, and expresses the resonant
//! remainder as a polynomial in the actions `I_j = (x_j²+y_j²)/2` whenever
//! every surviving monomial has equal `ζ`/`η` exponents.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use thiserror::Error;

use crate::numberfield::{FieldElem, FieldError, NumberField};
use crate::ratmat::{self, IntMat, RatMat};
use crate::series::{degree_of, monomials_of_degree, FormalSeries, SeriesError};

#[derive(Debug, Error)]
pub enum NormalFormError {
    #[error("characteristic polynomial does not factor over the declared field; \
             remaining factor: {factor}")]
    FieldTooSmall { factor: String },
    #[error("linear part: {0}")]
    BadLinearPart(String),
    #[error("{what}: expected {expected}, got {got}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("degenerate quadratic part: {0}")]
    DegenerateQuadraticPart(String),
    #[error("repeated eigenvalues prevent block separation: {0}")]
    UnresolvedMultiplicity(String),
    #[error("{0}")]
    ModeMismatch(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Series(#[from] SeriesError),
}

type NfResult<T> = Result<T, NormalFormError>;

/// Dense matrix over the number field, row-major.
pub type FieldMat = Vec<Vec<FieldElem>>;

pub fn mat_identity(field: &NumberField, m: usize) -> FieldMat {
    (0..m)
        .map(|i| {
            (0..m)
                .map(|j| if i == j { field.one() } else { field.zero() })
                .collect()
        })
        .collect()
}

pub fn mat_mul(field: &NumberField, a: &FieldMat, b: &FieldMat) -> FieldMat {
    let rows = a.len();
    let inner = b.len();
    let cols = b.first().map_or(0, Vec::len);
    (0..rows)
        .map(|i| {
            (0..cols)
                .map(|j| {
                    let mut sum = field.zero();
                    for k in 0..inner {
                        sum = field.add(&sum, &field.mul(&a[i][k], &b[k][j]));
                    }
                    sum
                })
                .collect()
        })
        .collect()
}

fn mat_sub(field: &NumberField, a: &FieldMat, b: &FieldMat) -> FieldMat {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| field.sub(x, y)).collect())
        .collect()
}

fn mat_add_scaled_identity(field: &NumberField, a: &FieldMat, c: &FieldElem) -> FieldMat {
    let mut out = a.clone();
    for (i, row) in out.iter_mut().enumerate() {
        row[i] = field.add(&row[i], c);
    }
    out
}

fn mat_is_zero(a: &FieldMat) -> bool {
    a.iter().all(|row| row.iter().all(FieldElem::is_zero))
}

fn mat_trace(field: &NumberField, a: &FieldMat) -> FieldElem {
    let mut t = field.zero();
    for (i, row) in a.iter().enumerate() {
        t = field.add(&t, &row[i]);
    }
    t
}

/// Gauss-Jordan inverse over the field; `None` when singular. Pivots must
/// be invertible, which over an actual field means nonzero.
fn mat_inverse(field: &NumberField, m: &FieldMat) -> Option<FieldMat> {
    let n = m.len();
    let mut a = m.clone();
    let mut inv = mat_identity(field, n);
    for col in 0..n {
        let mut pivot = None;
        for r in col..n {
            if !a[r][col].is_zero() {
                if let Ok(p) = field.inverse(&a[r][col]) {
                    pivot = Some((r, p));
                    break;
                }
            }
        }
        let (r, pinv) = pivot?;
        a.swap(col, r);
        inv.swap(col, r);
        for j in 0..n {
            a[col][j] = field.mul(&a[col][j], &pinv);
            inv[col][j] = field.mul(&inv[col][j], &pinv);
        }
        for r in 0..n {
            if r != col && !a[r][col].is_zero() {
                let f = a[r][col].clone();
                for j in 0..n {
                    let t = field.mul(&a[col][j], &f);
                    a[r][j] = field.sub(&a[r][j], &t);
                    let t = field.mul(&inv[col][j], &f);
                    inv[r][j] = field.sub(&inv[r][j], &t);
                }
            }
        }
    }
    Some(inv)
}

/// Basis of the kernel of `m` over the field, deterministic.
fn mat_kernel(field: &NumberField, m: &FieldMat) -> NfResult<Vec<Vec<FieldElem>>> {
    let rows = m.len();
    let cols = m.first().map_or(0, Vec::len);
    let mut a = m.clone();
    let mut pivots: Vec<(usize, usize)> = Vec::new();
    let mut r = 0;
    for c in 0..cols {
        if r >= rows {
            break;
        }
        let mut pivot = None;
        for i in r..rows {
            if !a[i][c].is_zero() {
                if let Ok(p) = field.inverse(&a[i][c]) {
                    pivot = Some((i, p));
                    break;
                }
            }
        }
        let Some((i, pinv)) = pivot else {
            if (r..rows).any(|i| !a[i][c].is_zero()) {
                return Err(NormalFormError::Field(FieldError::NotInvertible(
                    "kernel pivot".into(),
                )));
            }
            continue;
        };
        a.swap(r, i);
        for j in 0..cols {
            a[r][j] = field.mul(&a[r][j], &pinv);
        }
        for i in 0..rows {
            if i != r && !a[i][c].is_zero() {
                let f = a[i][c].clone();
                for j in 0..cols {
                    let t = field.mul(&a[r][j], &f);
                    a[i][j] = field.sub(&a[i][j], &t);
                }
            }
        }
        pivots.push((r, c));
        r += 1;
    }
    let pivot_cols: Vec<usize> = pivots.iter().map(|&(_, c)| c).collect();
    let mut basis = Vec::new();
    for free in (0..cols).filter(|c| !pivot_cols.contains(c)) {
        let mut v = vec![field.zero(); cols];
        v[free] = field.one();
        for &(pr, pc) in &pivots {
            v[pc] = field.neg(&a[pr][free]);
        }
        basis.push(v);
    }
    Ok(basis)
}

// ---------------------------------------------------------------------------
// Polynomials over the field (dense, constant term first).

type Poly = Vec<FieldElem>;

fn poly_trim(p: &mut Poly) {
    while p.len() > 1 && p.last().is_some_and(FieldElem::is_zero) {
        p.pop();
    }
}

fn poly_degree(p: &Poly) -> usize {
    p.len() - 1
}

fn poly_derivative(field: &NumberField, p: &Poly) -> Poly {
    if p.len() <= 1 {
        return vec![field.zero()];
    }
    let mut out: Poly = p[1..]
        .iter()
        .enumerate()
        .map(|(k, c)| field.scale(&BigRational::from_integer(BigInt::from(k + 1)), c))
        .collect();
    poly_trim(&mut out);
    out
}

fn poly_is_zero(p: &Poly) -> bool {
    p.iter().all(FieldElem::is_zero)
}

/// Euclidean division; the divisor's leading coefficient must invert.
fn poly_divmod(field: &NumberField, a: &Poly, b: &Poly) -> NfResult<(Poly, Poly)> {
    let db = poly_degree(b);
    let lead_inv = field.inverse(&b[db])?;
    let mut rem = a.clone();
    poly_trim(&mut rem);
    let mut quo = vec![field.zero(); a.len().max(1)];
    while !poly_is_zero(&rem) && poly_degree(&rem) >= db {
        let dr = poly_degree(&rem);
        let f = field.mul(&rem[dr], &lead_inv);
        quo[dr - db] = f.clone();
        for k in 0..=db {
            let t = field.mul(&f, &b[k]);
            rem[dr - db + k] = field.sub(&rem[dr - db + k], &t);
        }
        poly_trim(&mut rem);
        if poly_degree(&rem) == dr && !poly_is_zero(&rem) {
            return Err(NormalFormError::BadLinearPart(
                "polynomial division did not reduce the degree".into(),
            ));
        }
    }
    poly_trim(&mut quo);
    Ok((quo, rem))
}

fn poly_monic(field: &NumberField, p: &Poly) -> NfResult<Poly> {
    let lead_inv = field.inverse(&p[poly_degree(p)])?;
    Ok(p.iter().map(|c| field.mul(c, &lead_inv)).collect())
}

fn poly_gcd(field: &NumberField, a: &Poly, b: &Poly) -> NfResult<Poly> {
    let mut x = a.clone();
    let mut y = b.clone();
    poly_trim(&mut x);
    poly_trim(&mut y);
    while !poly_is_zero(&y) {
        let (_, r) = poly_divmod(field, &x, &y)?;
        x = y;
        y = r;
    }
    poly_monic(field, &x)
}

fn poly_eval_mat(field: &NumberField, p: &Poly, a: &FieldMat) -> FieldMat {
    let m = a.len();
    let mut out: FieldMat = (0..m).map(|_| vec![field.zero(); m]).collect();
    for c in p.iter().rev() {
        out = mat_mul(field, &out, a);
        out = mat_add_scaled_identity(field, &out, c);
    }
    out
}

fn poly_to_string(field: &NumberField, p: &Poly) -> String {
    let mut parts = Vec::new();
    for (k, c) in p.iter().enumerate().rev() {
        if c.is_zero() {
            continue;
        }
        let coeff = field.format(c);
        let part = match k {
            0 => coeff,
            1 if coeff == "1" => "t".into(),
            1 => format!("({coeff})*t"),
            _ if coeff == "1" => format!("t^{k}"),
            _ => format!("({coeff})*t^{k}"),
        };
        parts.push(part);
    }
    if parts.is_empty() {
        "0".into()
    } else {
        parts.join(" + ")
    }
}

/// Characteristic polynomial by the Faddeev–LeVerrier recurrence: only ring
/// operations and division by integers, so it works over any Q-algebra.
fn char_poly(field: &NumberField, a: &FieldMat) -> Poly {
    let m = a.len();
    let mut coeffs = vec![field.zero(); m + 1];
    coeffs[m] = field.one();
    let mut mk = mat_identity(field, m);
    for k in 1..=m {
        mk = mat_mul(field, a, &mk);
        let t = mat_trace(field, &mk);
        let c = field.scale(
            &(-BigRational::new(BigInt::one(), BigInt::from(k))),
            &t,
        );
        coeffs[m - k] = c.clone();
        mk = mat_add_scaled_identity(field, &mk, &c);
    }
    coeffs
}

// ---------------------------------------------------------------------------
// Eigenvalue extraction.

/// Square root of a rational inside the field: either a rational square
/// or `q·β_l` for a basis element with rational square. Deterministic:
/// first match in basis order, principal sign.
fn sqrt_in_field(field: &NumberField, r: &BigRational) -> Option<FieldElem> {
    if r.is_zero() {
        return Some(field.zero());
    }
    let rational_sqrt = |q: &BigRational| -> Option<BigRational> {
        if q.is_negative() {
            return None;
        }
        let sn = q.numer().sqrt();
        let sd = q.denom().sqrt();
        (&sn * &sn == *q.numer() && &sd * &sd == *q.denom())
            .then(|| BigRational::new(sn, sd))
    };
    if let Some(s) = rational_sqrt(r) {
        return Some(field.rational(s));
    }
    for l in 1..field.dim() {
        let b = field.basis_elem(l);
        let b2 = field.mul(&b, &b);
        if !b2.is_rational() || b2.is_zero() {
            continue;
        }
        let target = r / b2.rational_part();
        if let Some(q) = rational_sqrt(&target) {
            return Some(field.scale(&q, &b));
        }
    }
    None
}

/// Roots of a monic polynomial with rational coefficients, with
/// multiplicity, in deterministic order: rational roots ascending, then
/// conjugate pairs from quadratic factors. Fails when a factor of degree
/// ≥ 3 (or an unsolvable quadratic) remains.
fn rational_poly_roots(field: &NumberField, p: &Poly) -> NfResult<Vec<FieldElem>> {
    let too_small = |rem: &Poly| NormalFormError::FieldTooSmall {
        factor: poly_to_string(field, rem),
    };
    let rat_coeffs: Vec<BigRational> = p.iter().map(|c| c.rational_part().clone()).collect();
    let divisors = |n: &BigInt| -> NfResult<Vec<BigInt>> {
        let n: i64 = n.abs().try_into().map_err(|_| NormalFormError::FieldTooSmall {
            factor: "constant term too large for rational root search".into(),
        })?;
        let mut out = Vec::new();
        let mut d = 1;
        while d * d <= n {
            if n % d == 0 {
                out.push(BigInt::from(d));
                out.push(BigInt::from(n / d));
            }
            d += 1;
        }
        out.sort();
        out.dedup();
        Ok(out)
    };
    let mut rem: Vec<BigRational> = rat_coeffs;
    let mut rational_roots: Vec<BigRational> = Vec::new();
    loop {
        while rem.len() > 1 && rem.last().is_some_and(Zero::is_zero) {
            rem.pop();
        }
        if rem.len() <= 1 {
            break;
        }
        if rem[0].is_zero() {
            // t divides; root 0.
            rational_roots.push(BigRational::zero());
            rem.remove(0);
            continue;
        }
        let (v, _) = ratmat::primitive_integer(&rem);
        let cands_n = divisors(&v[0])?;
        let cands_d = divisors(v.last().expect("nonempty"))?;
        let mut found = None;
        'search: for den in &cands_d {
            for num in &cands_n {
                for sign in [1i64, -1] {
                    let cand = BigRational::new(num * BigInt::from(sign), den.clone());
                    let mut acc = BigRational::zero();
                    for c in rem.iter().rev() {
                        acc = acc * &cand + c;
                    }
                    if acc.is_zero() {
                        found = Some(cand);
                        break 'search;
                    }
                }
            }
        }
        let Some(root) = found else { break };
        // Synthetic division by (t − root).
        let mut quo = vec![BigRational::zero(); rem.len() - 1];
        let mut carry = BigRational::zero();
        for k in (0..rem.len() - 1).rev() {
            carry = &rem[k + 1] + &carry * &root;
            quo[k] = carry.clone();
        }
        rational_roots.push(root);
        rem = quo;
    }
    rational_roots.sort();
    let mut roots: Vec<FieldElem> = rational_roots
        .into_iter()
        .map(|q| field.rational(q))
        .collect();
    while rem.len() > 1 && rem.last().is_some_and(Zero::is_zero) {
        rem.pop();
    }
    match rem.len() - 1 {
        0 => {}
        2 => {
            // t² + bt + c after normalizing: roots (−b ± √(b²−4c))/2.
            let b = &rem[1] / &rem[2];
            let c = &rem[0] / &rem[2];
            let disc = &b * &b - BigRational::from_integer(4.into()) * &c;
            let rem_poly: Poly = rem.iter().map(|q| field.rational(q.clone())).collect();
            let s = sqrt_in_field(field, &disc).ok_or_else(|| too_small(&rem_poly))?;
            let half = BigRational::new(BigInt::one(), BigInt::from(2));
            let minus_b = field.rational(-b);
            roots.push(field.scale(&half, &field.sub(&minus_b, &s)));
            roots.push(field.scale(&half, &field.add(&minus_b, &s)));
        }
        _ => {
            let rem_poly: Poly = rem.iter().map(|q| field.rational(q.clone())).collect();
            return Err(too_small(&rem_poly));
        }
    }
    Ok(roots)
}

fn is_triangular(a: &FieldMat) -> bool {
    let m = a.len();
    let upper = (0..m).all(|i| (0..i).all(|j| a[i][j].is_zero()));
    let lower = (0..m).all(|i| (i + 1..m).all(|j| a[i][j].is_zero()));
    upper || lower
}

fn is_diagonal(a: &FieldMat) -> bool {
    a.iter()
        .enumerate()
        .all(|(i, row)| row.iter().enumerate().all(|(j, c)| i == j || c.is_zero()))
}

// ---------------------------------------------------------------------------
// Linear part: Jordan–Chevalley splitting and eigendata.

/// Exact splitting `A = S + N` with `S` semisimple, `N` nilpotent,
/// `[S,N] = 0`, plus the eigenvalues of `S` and — when `S` is not already
/// diagonal — an eigenbasis over the field.
#[derive(Clone, Debug)]
pub struct LinearPart {
    pub a: FieldMat,
    pub s: FieldMat,
    pub n: FieldMat,
    /// Eigenvalues in coordinate order when `s` is triangular, otherwise in
    /// the column order of `eigenbasis`.
    pub gamma: Vec<FieldElem>,
    /// Columns diagonalize `s`; `None` when `s` is already diagonal.
    pub eigenbasis: Option<FieldMat>,
}

pub fn split_linear(field: &NumberField, a: &FieldMat) -> NfResult<LinearPart> {
    let m = a.len();
    if m == 0 || a.iter().any(|row| row.len() != m) {
        return Err(NormalFormError::BadLinearPart("matrix must be square".into()));
    }
    let chi = char_poly(field, a);
    let chi_d = poly_derivative(field, &chi);
    let gcd = poly_gcd(field, &chi, &chi_d)?;
    let (squarefree, _) = poly_divmod(field, &chi, &gcd)?;
    let sf_d = poly_derivative(field, &squarefree);
    // Newton iteration S ← S − g(S)·g′(S)⁻¹ converges quadratically to the
    // semisimple part; ⌈log₂ m⌉ + 2 steps always suffice.
    let mut s = a.clone();
    let mut steps = 0usize;
    loop {
        let gs = poly_eval_mat(field, &squarefree, &s);
        if mat_is_zero(&gs) {
            break;
        }
        steps += 1;
        if steps > m + 4 {
            return Err(NormalFormError::FieldTooSmall {
                factor: poly_to_string(field, &squarefree),
            });
        }
        let dgs = poly_eval_mat(field, &sf_d, &s);
        let inv = mat_inverse(field, &dgs).ok_or(NormalFormError::FieldTooSmall {
            factor: poly_to_string(field, &squarefree),
        })?;
        s = mat_sub(field, &s, &mat_mul(field, &gs, &inv));
    }
    let n = mat_sub(field, a, &s);
    let sn = mat_mul(field, &s, &n);
    let ns = mat_mul(field, &n, &s);
    let mut n_pow = n.clone();
    for _ in 1..m {
        n_pow = mat_mul(field, &n_pow, &n);
    }
    if sn != ns || !mat_is_zero(&n_pow) {
        return Err(NormalFormError::BadLinearPart(
            "splitting check failed: the declared multiplication table is not a field".into(),
        ));
    }

    if is_triangular(&s) {
        let gamma = (0..m).map(|i| s[i][i].clone()).collect();
        let eigenbasis = if is_diagonal(&s) {
            None
        } else {
            Some(eigenbasis_for(field, &s, &diag_of(&s))?)
        };
        return Ok(LinearPart {
            a: a.clone(),
            s,
            n,
            gamma,
            eigenbasis,
        });
    }
    if chi.iter().all(FieldElem::is_rational) {
        let roots = rational_poly_roots(field, &chi)?;
        if roots.len() != m {
            return Err(NormalFormError::FieldTooSmall {
                factor: poly_to_string(field, &chi),
            });
        }
        let basis = eigenbasis_for(field, &s, &roots)?;
        return Ok(LinearPart {
            a: a.clone(),
            s,
            n,
            gamma: roots,
            eigenbasis: Some(basis),
        });
    }
    Err(NormalFormError::FieldTooSmall {
        factor: poly_to_string(field, &chi),
    })
}

fn diag_of(s: &FieldMat) -> Vec<FieldElem> {
    (0..s.len()).map(|i| s[i][i].clone()).collect()
}

/// Columns of an eigenbasis of semisimple `s` matching the eigenvalue list
/// (with multiplicity); kernel vectors per distinct eigenvalue in order.
fn eigenbasis_for(
    field: &NumberField,
    s: &FieldMat,
    gamma: &[FieldElem],
) -> NfResult<FieldMat> {
    let m = s.len();
    let mut distinct: Vec<FieldElem> = Vec::new();
    for g in gamma {
        if !distinct.contains(g) {
            distinct.push(g.clone());
        }
    }
    let mut columns: Vec<Vec<FieldElem>> = Vec::new();
    let mut ordered_gamma: Vec<FieldElem> = Vec::new();
    for g in &distinct {
        let mut shifted = s.clone();
        for (i, row) in shifted.iter_mut().enumerate() {
            row[i] = field.sub(&row[i], g);
        }
        let kernel = mat_kernel(field, &shifted)?;
        let mult = gamma.iter().filter(|x| *x == g).count();
        if kernel.len() != mult {
            return Err(NormalFormError::BadLinearPart(format!(
                "eigenvalue {} has geometric multiplicity {} but algebraic {}",
                field.format(g),
                kernel.len(),
                mult
            )));
        }
        for v in kernel {
            columns.push(v);
            ordered_gamma.push(g.clone());
        }
    }
    if columns.len() != m {
        return Err(NormalFormError::BadLinearPart(
            "eigenvectors do not span".into(),
        ));
    }
    // Column-major assembly.
    let p: FieldMat = (0..m)
        .map(|i| (0..m).map(|c| columns[c][i].clone()).collect())
        .collect();
    if mat_inverse(field, &p).is_none() {
        return Err(NormalFormError::BadLinearPart(
            "eigenbasis is singular".into(),
        ));
    }
    Ok(p)
}

// ---------------------------------------------------------------------------
// Resonance lattice and toric degree.

/// Integer-diagonal torus generators reconstructing the semisimple part:
/// `γ_i = Σ_s λ_s·Z_s[i]` exactly, with `d` minimal.
#[derive(Clone, Debug)]
pub struct ToricData {
    pub degree: usize,
    /// Each generator is the integer diagonal `(a_{s1}, …, a_{sm})`.
    pub generators: Vec<Vec<BigInt>>,
    pub lambdas: Vec<FieldElem>,
}

/// Exact resonance data for eigenvalues `γ` up to a truncation degree.
#[derive(Clone, Debug)]
pub struct ResonanceData {
    pub maxdeg: usize,
    /// Per component `j`: all `k` with `|k| ≤ maxdeg` and `⟨γ,k⟩ = γ_j`.
    pub resonant: Vec<Vec<Vec<u32>>>,
    /// Hermite-reduced Z-basis of `{k ∈ Z^m : ⟨γ,k⟩ = 0}`.
    pub kernel: Vec<Vec<BigInt>>,
    pub toric: ToricData,
}

/// Rational coordinate matrix of `γ` over the field basis: row per basis
/// element, column per component.
fn coefficient_matrix(field: &NumberField, gamma: &[FieldElem]) -> RatMat {
    (0..field.dim())
        .map(|l| gamma.iter().map(|g| g.0[l].clone()).collect())
        .collect()
}

pub fn resonance_lattice(
    field: &NumberField,
    gamma: &[FieldElem],
    maxdeg: usize,
) -> NfResult<ResonanceData> {
    let m = gamma.len();
    let c = coefficient_matrix(field, gamma);
    let int_rows: IntMat = c
        .iter()
        .filter(|row| row.iter().any(|q| !q.is_zero()))
        .map(|row| ratmat::primitive_integer(row).0)
        .collect();
    let kernel = if int_rows.is_empty() {
        // γ = 0: every k annihilates; the kernel is all of Z^m.
        (0..m)
            .map(|i| {
                (0..m)
                    .map(|j| BigInt::from((i == j) as i64))
                    .collect()
            })
            .collect()
    } else {
        ratmat::int_kernel(&int_rows)
    };
    let mut resonant: Vec<Vec<Vec<u32>>> = vec![Vec::new(); m];
    for r in 0..=maxdeg {
        for k in monomials_of_degree(m, r) {
            let pairing = pair(field, gamma, &k);
            for (j, g) in gamma.iter().enumerate() {
                if &pairing == g {
                    resonant[j].push(k.clone());
                }
            }
        }
    }
    Ok(ResonanceData {
        maxdeg,
        resonant,
        kernel,
        toric: toric_degree(field, gamma),
    })
}

fn pair(field: &NumberField, gamma: &[FieldElem], k: &[u32]) -> FieldElem {
    let mut sum = field.zero();
    for (g, &e) in gamma.iter().zip(k) {
        if e != 0 {
            sum = field.add(
                &sum,
                &field.scale(&BigRational::from_integer(BigInt::from(e)), g),
            );
        }
    }
    sum
}

/// Minimal integer-diagonal generators: the independent rows of the
/// coefficient matrix of `γ`, taken in basis order and scaled primitive.
/// `d` is the rank of that matrix over Q.
pub fn toric_degree(field: &NumberField, gamma: &[FieldElem]) -> ToricData {
    let c = coefficient_matrix(field, gamma);
    let mut selected: Vec<usize> = Vec::new();
    for l in 0..c.len() {
        let mut trial: RatMat = selected.iter().map(|&s| c[s].clone()).collect();
        trial.push(c[l].clone());
        if ratmat::rank(&trial) > selected.len() {
            selected.push(l);
        }
    }
    let mut generators = Vec::new();
    let mut scales = Vec::new();
    for &s in &selected {
        let (z, scale) = ratmat::primitive_integer(&c[s]);
        generators.push(z);
        scales.push(scale);
    }
    // λ_s collects every basis element's weight on generator s:
    // row_l = Σ_s w[l][s]·scale_s·Z_s, so λ_s = Σ_l w[l][s]·scale_s·β_l.
    let w = ratmat::express_rows(&c, &selected).expect("selected rows span all rows");
    let lambdas: Vec<FieldElem> = (0..selected.len())
        .map(|s| {
            let coords: Vec<BigRational> = (0..field.dim())
                .map(|l| &w[l][s] * &scales[s])
                .collect();
            FieldElem(coords)
        })
        .collect();
    ToricData {
        degree: selected.len(),
        generators,
        lambdas,
    }
}

// ---------------------------------------------------------------------------
// Lie transforms.

/// Vector-field bracket `[f, g]_j = Σ_a (f_a ∂_a g_j − g_a ∂_a f_j)`.
pub fn vf_bracket(
    field: &NumberField,
    f: &[FormalSeries],
    g: &[FormalSeries],
) -> Vec<FormalSeries> {
    let m = f.len();
    (0..m)
        .map(|j| {
            let mut out = FormalSeries::zero(f[j].vars(), f[j].trunc().min(g[j].trunc()));
            for a in 0..m {
                let t1 = f[a].mul(&g[j].partial(a, field), field);
                let t2 = g[a].mul(&f[j].partial(a, field), field);
                out = out.add(&t1.sub(&t2, field), field);
            }
            out
        })
        .collect()
}

/// `exp(ad_G)X = Σ_s ad_G^s(X)/s!`, exact and finite at a fixed truncation
/// because a generator of degree ≥ 2 raises the degree every application.
fn exp_ad_vf(
    field: &NumberField,
    gen: &[FormalSeries],
    x: &[FormalSeries],
    maxdeg: usize,
) -> Vec<FormalSeries> {
    let mut acc: Vec<FormalSeries> = x.to_vec();
    let mut term: Vec<FormalSeries> = x.to_vec();
    for s in 1..=(maxdeg + 1) {
        term = vf_bracket(field, gen, &term);
        let inv_s = BigRational::new(BigInt::one(), BigInt::from(s));
        term = term
            .iter()
            .map(|t| t.scale_rational(&inv_s, field))
            .collect();
        if term.iter().all(FormalSeries::is_zero) {
            break;
        }
        acc = acc
            .iter()
            .zip(&term)
            .map(|(a, t)| a.add(t, field))
            .collect();
    }
    acc
}

fn exp_ad_poisson(
    field: &NumberField,
    gen: &FormalSeries,
    h: &FormalSeries,
    pairs: &[(usize, usize)],
    maxdeg: usize,
) -> FormalSeries {
    let mut acc = h.clone();
    let mut term = h.clone();
    for s in 1..=(maxdeg + 1) {
        term = gen.poisson(&term, pairs, field);
        let inv_s = BigRational::new(BigInt::one(), BigInt::from(s));
        term = term.scale_rational(&inv_s, field);
        if term.is_zero() {
            break;
        }
        acc = acc.add(&term, field);
    }
    acc
}

// ---------------------------------------------------------------------------
// Poincaré–Dulac normalization (vector-field mode).

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NormalizeMode {
    VectorField,
    Hamiltonian,
}

/// One degree step of the transformation: enough to replay it.
#[derive(Clone, Debug)]
pub struct GeneratorStep {
    pub degree: usize,
    /// Vector-field mode: `m` components; Hamiltonian mode: one entry.
    pub generator: Vec<FormalSeries>,
}

#[derive(Clone, Debug)]
pub struct NormalForm {
    pub mode: NormalizeMode,
    /// The working field: the declared one, complexified in Hamiltonian
    /// mode when it lacks an imaginary unit.
    pub field: NumberField,
    pub maxdeg: usize,
    /// Eigenvalues in the working coordinates.
    pub gamma: Vec<FieldElem>,
    /// The input expressed in working coordinates (after the eigenbasis
    /// conjugation or the complex canonical substitution); replaying the
    /// log on this reproduces `result` coefficient-for-coefficient.
    pub working_input: Vec<FormalSeries>,
    /// Normalized series in working coordinates: every monomial resonant.
    pub result: Vec<FormalSeries>,
    /// Hamiltonian mode, when every resonant monomial pairs `ζ` with `η`
    /// equally: the normalized Hamiltonian as a polynomial in the actions
    /// `I_j = (x_j²+y_j²)/2`.
    pub actions_polynomial: Option<FormalSeries>,
    pub log: Vec<GeneratorStep>,
    /// Eigenbasis conjugation applied before normalizing, if any.
    pub conjugation: Option<FieldMat>,
    /// The nilpotent part is nonzero: the resonant remainder commutes with
    /// the semisimple part only, not with the full linear part.
    pub nilpotent_obstruction: bool,
}

/// Poincaré–Dulac normalization of a formal vector field: removes every
/// monomial with `⟨γ,k⟩ ≠ γ_j` through `maxdeg`, leaving a series that
/// commutes exactly with the semisimple linear part.
pub fn pd_normalize(
    field: &NumberField,
    x: &[FormalSeries],
    maxdeg: usize,
) -> NfResult<NormalForm> {
    let m = x.len();
    if m == 0 {
        return Err(NormalFormError::CountMismatch {
            what: "vector field components",
            expected: 1,
            got: 0,
        });
    }
    for (j, c) in x.iter().enumerate() {
        if c.vars() != m {
            return Err(NormalFormError::CountMismatch {
                what: "series variables",
                expected: m,
                got: c.vars(),
            });
        }
        if !c.degree_part(0).is_zero() {
            return Err(NormalFormError::ModeMismatch(format!(
                "component {j} has a constant term; the origin must be an equilibrium"
            )));
        }
    }
    let mut work: Vec<FormalSeries> = x.iter().map(|c| c.truncated(maxdeg)).collect();
    // Linear part.
    let mut a: FieldMat = (0..m).map(|_| vec![field.zero(); m]).collect();
    for (i, row) in a.iter_mut().enumerate() {
        for (j, entry) in row.iter_mut().enumerate() {
            let mut k = vec![0u32; m];
            k[j] = 1;
            *entry = work[i].coeff(&k, field);
        }
    }
    let lp = split_linear(field, &a)?;
    let mut conjugation = None;
    let (gamma, n_mat) = match &lp.eigenbasis {
        None => (lp.gamma.clone(), lp.n.clone()),
        Some(p) => {
            let pinv = mat_inverse(field, p).expect("eigenbasis inverts");
            let substituted: Vec<FormalSeries> =
                work.iter().map(|c| c.linear_substitute(p, field)).collect();
            work = (0..m)
                .map(|e| {
                    let mut s = FormalSeries::zero(m, maxdeg);
                    for (i, sub) in substituted.iter().enumerate() {
                        s = s.add(&sub.scale(&pinv[e][i], field), field);
                    }
                    s
                })
                .collect();
            let n_conj = mat_mul(field, &pinv, &mat_mul(field, &lp.n, p));
            conjugation = Some(p.clone());
            (lp.gamma.clone(), n_conj)
        }
    };
    let nilpotent_obstruction = !mat_is_zero(&n_mat);
    // The nilpotent part as a linear vector field, for the commuting
    // correction series of the homological inverse.
    let n_field: Vec<FormalSeries> = (0..m)
        .map(|i| {
            let mut s = FormalSeries::zero(m, maxdeg);
            for (j, c) in n_mat[i].iter().enumerate() {
                let mut k = vec![0u32; m];
                k[j] = 1;
                s.add_term(&k, c.clone()).expect("arity is consistent");
            }
            s
        })
        .collect();
    let working_input = work.clone();

    let delta = |k: &[u32], j: usize| field.sub(&pair(field, &gamma, k), &gamma[j]);
    // Divides each monomial by its ad_S eigenvalue; caller guarantees every
    // present monomial is nonresonant.
    let d_inverse = |v: &[FormalSeries]| -> NfResult<Vec<FormalSeries>> {
        let mut out = Vec::with_capacity(m);
        for (j, comp) in v.iter().enumerate() {
            let mut s = FormalSeries::zero(m, maxdeg);
            for (k, c) in comp.terms() {
                let d = delta(k, j);
                s.add_term(k, field.div(c, &d)?)?;
            }
            out.push(s);
        }
        Ok(out)
    };

    let mut log = Vec::new();
    for r in 2..=maxdeg {
        let nonres: Vec<FormalSeries> = (0..m)
            .map(|j| {
                let mut s = FormalSeries::zero(m, maxdeg);
                for (k, c) in work[j].degree_part(r).terms() {
                    if !delta(k, j).is_zero() {
                        s.add_term(k, c.clone()).expect("arity is consistent");
                    }
                }
                s
            })
            .collect();
        if nonres.iter().all(FormalSeries::is_zero) {
            continue;
        }
        // G = Σ_s (−D⁻¹ ad_N)^s D⁻¹ R on the nonresonant subspace, which
        // ad_N preserves because [S, N] = 0.
        let mut gen = d_inverse(&nonres)?;
        if nilpotent_obstruction {
            let mut term = gen.clone();
            let dim_bound = m * monomials_of_degree(m, r).len();
            for _ in 0..=dim_bound {
                let bracketed = vf_bracket(field, &n_field, &term);
                if bracketed.iter().all(FormalSeries::is_zero) {
                    break;
                }
                term = d_inverse(&bracketed)?
                    .iter()
                    .map(|t| t.neg(field))
                    .collect();
                gen = gen
                    .iter()
                    .zip(&term)
                    .map(|(g, t)| g.add(t, field))
                    .collect();
            }
        }
        work = exp_ad_vf(field, &gen, &work, maxdeg);
        for (j, comp) in work.iter().enumerate() {
            for (k, _) in comp.degree_part(r).terms() {
                assert!(
                    delta(k, j).is_zero(),
                    "homological step left a nonresonant degree-{r} monomial"
                );
            }
        }
        log.push(GeneratorStep {
            degree: r,
            generator: gen,
        });
    }
    Ok(NormalForm {
        mode: NormalizeMode::VectorField,
        field: field.clone(),
        maxdeg,
        gamma,
        working_input,
        result: work,
        actions_polynomial: None,
        log,
        conjugation,
        nilpotent_obstruction,
    })
}

// ---------------------------------------------------------------------------
// Birkhoff normalization (Hamiltonian mode).

/// Canonical conjugate pairs for `n` degrees of freedom in the variable
/// ordering `(ζ_1..ζ_n, η_1..η_n)` — or `(x_1..x_n, y_1..y_n)`.
pub fn canonical_pairs_indices(dof: usize) -> Vec<(usize, usize)> {
    (0..dof).map(|j| (j, dof + j)).collect()
}

/// Birkhoff normalization of `H = Σ ω_j (x_j²+y_j²)/2 + h.o.t.` over a real
/// field: conjugates into complex canonical coordinates, removes every
/// monomial with `⟨ω, a−b⟩ ≠ 0`, and reads the result as a polynomial in
/// the actions when only `a = b` terms survive.
pub fn birkhoff_normalize(
    field: &NumberField,
    h: &FormalSeries,
    dof: usize,
    maxdeg: usize,
) -> NfResult<NormalForm> {
    let m = 2 * dof;
    if h.vars() != m {
        return Err(NormalFormError::CountMismatch {
            what: "Hamiltonian variables",
            expected: m,
            got: h.vars(),
        });
    }
    if !h.degree_part(0).is_zero() || !h.degree_part(1).is_zero() {
        return Err(NormalFormError::ModeMismatch(
            "the origin must be a critical point of the Hamiltonian".into(),
        ));
    }
    // Working field with i; real coordinates lift unchanged because the
    // complexified basis extends the declared one.
    let (wf, lift_dim) = if field.has_imaginary_unit() {
        (field.clone(), field.dim())
    } else {
        (field.complexified(), field.dim())
    };
    let lift = |c: &FieldElem| -> FieldElem {
        let mut v = c.0.clone();
        v.resize(wf.dim(), BigRational::zero());
        FieldElem(v)
    };
    let _ = lift_dim;
    let h = {
        let mut s = FormalSeries::zero(m, maxdeg);
        for (k, c) in h.truncated(maxdeg).terms() {
            s.add_term(k, lift(c))?;
        }
        s
    };
    // Quadratic part must be Σ ω_j (x_j²+y_j²)/2 exactly.
    let h2 = h.degree_part(2);
    let mut omega: Vec<FieldElem> = Vec::with_capacity(dof);
    let mut expected = FormalSeries::zero(m, maxdeg);
    for j in 0..dof {
        let mut kx = vec![0u32; m];
        kx[j] = 2;
        let half_w = h2.coeff(&kx, &wf);
        let w = wf.add(&half_w, &half_w);
        if w.is_zero() {
            return Err(NormalFormError::DegenerateQuadraticPart(format!(
                "frequency ω_{} vanishes",
                j + 1
            )));
        }
        if !wf.is_real(&w) {
            return Err(NormalFormError::ModeMismatch(format!(
                "frequency ω_{} is not real",
                j + 1
            )));
        }
        let mut ky = vec![0u32; m];
        ky[dof + j] = 2;
        expected.add_term(&kx, half_w.clone())?;
        expected.add_term(&ky, half_w)?;
        omega.push(w);
    }
    if expected != h2 {
        return Err(NormalFormError::ModeMismatch(
            "quadratic part must be Σ ω_j (x_j²+y_j²)/2 in canonical coordinates".into(),
        ));
    }
    // x_j = ζ_j/2 − i η_j,  y_j = −i ζ_j/2 + η_j  — then {ζ_j, η_j} = 1 and
    // H₂ = Σ −i ω_j ζ_j η_j.
    let i_elem = wf.imaginary_unit().expect("working field has i");
    let half = BigRational::new(BigInt::one(), BigInt::from(2));
    let mut subst: FieldMat = (0..m).map(|_| vec![wf.zero(); m]).collect();
    for j in 0..dof {
        subst[j][j] = wf.rational(half.clone());
        subst[j][dof + j] = wf.neg(&i_elem);
        subst[dof + j][j] = wf.scale(&-half.clone(), &i_elem);
        subst[dof + j][dof + j] = wf.one();
    }
    let mut work = h.linear_substitute(&subst, &wf);
    let working_input = vec![work.clone()];
    let pairs = canonical_pairs_indices(dof);
    // ad_{H₂} multiplies ζ^a η^b by i⟨ω, a−b⟩.
    let detune = |k: &[u32]| -> FieldElem {
        let mut sum = wf.zero();
        for j in 0..dof {
            let diff = k[j] as i64 - k[dof + j] as i64;
            if diff != 0 {
                sum = wf.add(
                    &sum,
                    &wf.scale(&BigRational::from_integer(BigInt::from(diff)), &omega[j]),
                );
            }
        }
        sum
    };

    let mut log = Vec::new();
    for r in 3..=maxdeg {
        let mut gen = FormalSeries::zero(m, maxdeg);
        for (k, c) in work.degree_part(r).terms() {
            let d = detune(k);
            if d.is_zero() {
                continue;
            }
            gen.add_term(k, wf.div(c, &wf.mul(&i_elem, &d))?)?;
        }
        if gen.is_zero() {
            continue;
        }
        work = exp_ad_poisson(&wf, &gen, &work, &pairs, maxdeg);
        for (k, _) in work.degree_part(r).terms() {
            assert!(
                detune(k).is_zero(),
                "homological step left a detuned degree-{r} monomial"
            );
        }
        log.push(GeneratorStep {
            degree: r,
            generator: vec![gen],
        });
    }

    // ζ_j η_j = i·I_j, so a monomial with a = b reads i^{|a|}·I^a.
    let paired = work
        .terms()
        .all(|(k, _)| (0..dof).all(|j| k[j] == k[dof + j]));
    let actions_polynomial = if paired {
        let mut ipoly = FormalSeries::zero(dof, maxdeg);
        for (k, c) in work.terms() {
            let a: Vec<u32> = k[..dof].to_vec();
            let coeff = wf.mul(c, &wf.pow(&i_elem, degree_of(&a) as u32));
            if !wf.is_real(&coeff) {
                return Err(NormalFormError::ModeMismatch(format!(
                    "action coefficient {} is not real",
                    wf.format(&coeff)
                )));
            }
            ipoly.add_term(&a, coeff)?;
        }
        Some(ipoly)
    } else {
        None
    };

    let mut gamma: Vec<FieldElem> = omega
        .iter()
        .map(|w| wf.neg(&wf.mul(&i_elem, w)))
        .collect();
    gamma.extend(omega.iter().map(|w| wf.mul(&i_elem, w)));
    Ok(NormalForm {
        mode: NormalizeMode::Hamiltonian,
        field: wf,
        maxdeg,
        gamma,
        working_input,
        result: vec![work],
        actions_polynomial,
        log,
        conjugation: None,
        nilpotent_obstruction: false,
    })
}

/// Replays a generator log on series in working coordinates; with the
/// original `working_input` this must reproduce `result` exactly.
pub fn apply_generator_log(
    field: &NumberField,
    mode: &NormalizeMode,
    input: &[FormalSeries],
    log: &[GeneratorStep],
    maxdeg: usize,
) -> Vec<FormalSeries> {
    let mut work: Vec<FormalSeries> = input.iter().map(|s| s.truncated(maxdeg)).collect();
    for step in log {
        match mode {
            NormalizeMode::VectorField => {
                work = exp_ad_vf(field, &step.generator, &work, maxdeg);
            }
            NormalizeMode::Hamiltonian => {
                let dof = work[0].vars() / 2;
                let pairs = canonical_pairs_indices(dof);
                work = work
                    .iter()
                    .map(|h| exp_ad_poisson(field, &step.generator[0], h, &pairs, maxdeg))
                    .collect();
            }
        }
    }
    work
}

// ---------------------------------------------------------------------------
// Williamson classification.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockLabel {
    Elliptic,
    Hyperbolic,
    FocusFocus,
}

#[derive(Clone, Debug)]
pub struct WilliamsonBlock {
    pub label: BlockLabel,
    /// Exact squared eigenvalue `u = t²` when it is rational.
    pub squared_eigenvalue: Option<BigRational>,
    /// The irreducible factor of the reduced characteristic polynomial
    /// this block came from, in the variable `u = t²`.
    pub factor: String,
}

/// Counts of canonical blocks of a nondegenerate quadratic Hamiltonian:
/// `elliptic + hyperbolic + 2·focus = n`.
#[derive(Clone, Debug)]
pub struct WilliamsonType {
    pub elliptic: usize,
    pub hyperbolic: usize,
    pub focus: usize,
    pub blocks: Vec<WilliamsonBlock>,
}

fn rat_poly_to_string(p: &[BigRational], var: &str) -> String {
    let mut parts = Vec::new();
    for (k, c) in p.iter().enumerate().rev() {
        if c.is_zero() {
            continue;
        }
        let part = match k {
            0 => format!("{c}"),
            1 if c.is_one() => var.into(),
            1 => format!("({c})*{var}"),
            _ if c.is_one() => format!("{var}^{k}"),
            _ => format!("({c})*{var}^{k}"),
        };
        parts.push(part);
    }
    if parts.is_empty() {
        "0".into()
    } else {
        parts.join(" + ")
    }
}

fn rat_poly_trim(p: &mut Vec<BigRational>) {
    while p.len() > 1 && p.last().is_some_and(Zero::is_zero) {
        p.pop();
    }
}

fn rat_poly_divmod(a: &[BigRational], b: &[BigRational]) -> (Vec<BigRational>, Vec<BigRational>) {
    let mut rem = a.to_vec();
    rat_poly_trim(&mut rem);
    let db = b.len() - 1;
    let mut quo = vec![BigRational::zero(); a.len().max(1)];
    while rem.len() > db && rem.iter().any(|c| !c.is_zero()) {
        let dr = rem.len() - 1;
        let f = &rem[dr] / &b[db];
        quo[dr - db] = f.clone();
        for k in 0..=db {
            let t = &b[k] * &f;
            rem[dr - db + k] -= t;
        }
        rat_poly_trim(&mut rem);
        if rem.len() - 1 == dr && rem.iter().any(|c| !c.is_zero()) {
            unreachable!("rational division reduces degree");
        }
        if rem.len() == 1 && rem[0].is_zero() {
            break;
        }
    }
    rat_poly_trim(&mut quo);
    (quo, rem)
}

fn rat_poly_gcd(a: &[BigRational], b: &[BigRational]) -> Vec<BigRational> {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    rat_poly_trim(&mut x);
    rat_poly_trim(&mut y);
    while y.iter().any(|c| !c.is_zero()) {
        let (_, r) = rat_poly_divmod(&x, &y);
        x = y;
        y = r;
    }
    let lead = x.last().expect("nonempty").clone();
    if !lead.is_zero() {
        for c in &mut x {
            *c /= &lead;
        }
    }
    x
}

fn rat_poly_derivative(p: &[BigRational]) -> Vec<BigRational> {
    if p.len() <= 1 {
        return vec![BigRational::zero()];
    }
    p[1..]
        .iter()
        .enumerate()
        .map(|(k, c)| c * BigRational::from_integer(BigInt::from(k + 1)))
        .collect()
}

fn sign_at_zero(p: &[BigRational]) -> i32 {
    match p[0].cmp(&BigRational::zero()) {
        std::cmp::Ordering::Less => -1,
        std::cmp::Ordering::Equal => 0,
        std::cmp::Ordering::Greater => 1,
    }
}

fn sign_at_infinity(p: &[BigRational], positive: bool) -> i32 {
    let d = p.len() - 1;
    let lead = p.last().expect("nonempty");
    let mut s = if lead.is_negative() { -1 } else { 1 };
    if !positive && d % 2 == 1 {
        s = -s;
    }
    if lead.is_zero() {
        0
    } else {
        s
    }
}

fn sign_variations(signs: &[i32]) -> usize {
    let nz: Vec<i32> = signs.iter().copied().filter(|&s| s != 0).collect();
    nz.windows(2).filter(|w| w[0] != w[1]).count()
}

/// Real roots of a squarefree rational polynomial in `(−∞,0)` and `(0,∞)`
/// by Sturm's theorem; the polynomial must not vanish at 0.
fn sturm_root_counts(p: &[BigRational]) -> (usize, usize) {
    let mut chain: Vec<Vec<BigRational>> = vec![p.to_vec(), rat_poly_derivative(p)];
    loop {
        let last = &chain[chain.len() - 1];
        if last.iter().all(Zero::is_zero) || last.len() == 1 {
            break;
        }
        let prev = &chain[chain.len() - 2];
        let (_, mut r) = rat_poly_divmod(prev, last);
        for c in &mut r {
            *c = -c.clone();
        }
        let stop = r.iter().all(Zero::is_zero);
        chain.push(r);
        if stop {
            break;
        }
    }
    let v_minus: Vec<i32> = chain.iter().map(|q| sign_at_infinity(q, false)).collect();
    let v_zero: Vec<i32> = chain.iter().map(|q| sign_at_zero(q)).collect();
    let v_plus: Vec<i32> = chain.iter().map(|q| sign_at_infinity(q, true)).collect();
    let negative = sign_variations(&v_minus) - sign_variations(&v_zero);
    let positive = sign_variations(&v_zero) - sign_variations(&v_plus);
    (negative, positive)
}

/// Williamson type of a quadratic Hamiltonian over Q in canonical
/// coordinates `(x_1..x_n, y_1..y_n)`: eigenvalues of `Π·Hess(H₂)` come in
/// `±` pairs, so the characteristic polynomial is even; its reduction
/// `ρ(u)`, `u = t²`, has negative real roots for elliptic blocks, positive
/// for hyperbolic, and nonreal conjugate pairs for focus-focus quadruples.
pub fn williamson_classify(
    field: &NumberField,
    h2: &FormalSeries,
) -> NfResult<WilliamsonType> {
    let m = h2.vars();
    if m == 0 || m % 2 != 0 {
        return Err(NormalFormError::CountMismatch {
            what: "canonical coordinates",
            expected: m + 1,
            got: m,
        });
    }
    let n = m / 2;
    if h2.is_zero() || h2.min_degree() != Some(2) || h2.max_degree() != 2 {
        return Err(NormalFormError::ModeMismatch(
            "classification takes a purely quadratic Hamiltonian".into(),
        ));
    }
    if h2.terms().any(|(_, c)| !c.is_rational()) {
        return Err(NormalFormError::ModeMismatch(
            "classification runs over rational coefficients".into(),
        ));
    }
    // Hessian from the quadratic coefficients.
    let q = NumberField::rationals();
    let mut hess: RatMat = ratmat::zeros(m, m);
    for (k, c) in h2.terms() {
        let idx: Vec<usize> = (0..m).filter(|&v| k[v] > 0).collect();
        let coeff = c.rational_part();
        match idx.len() {
            1 => {
                let a = idx[0];
                hess[a][a] = coeff * BigRational::from_integer(2.into());
            }
            2 => {
                let (a, b) = (idx[0], idx[1]);
                hess[a][b] = coeff.clone();
                hess[b][a] = coeff.clone();
            }
            _ => unreachable!("quadratic monomials touch at most two variables"),
        }
    }
    // M = Π·B for ẋ = ∂H/∂y, ẏ = −∂H/∂x.
    let mut lin: RatMat = ratmat::zeros(m, m);
    for j in 0..m {
        for i in 0..n {
            lin[i][j] = hess[n + i][j].clone();
            lin[n + i][j] = -hess[i][j].clone();
        }
    }
    let lin_field: FieldMat = lin
        .iter()
        .map(|row| row.iter().map(|c| q.rational(c.clone())).collect())
        .collect();
    let chi = char_poly(&q, &lin_field);
    let chi_rat: Vec<BigRational> = chi.iter().map(|c| c.rational_part().clone()).collect();
    for (k, c) in chi_rat.iter().enumerate() {
        if k % 2 == 1 && !c.is_zero() {
            return Err(NormalFormError::BadLinearPart(
                "characteristic polynomial of a Hamiltonian matrix must be even".into(),
            ));
        }
    }
    let rho: Vec<BigRational> = chi_rat.iter().step_by(2).cloned().collect();
    if rho[0].is_zero() {
        return Err(NormalFormError::DegenerateQuadraticPart(
            "the linearization has a zero eigenvalue".into(),
        ));
    }
    let gcd = rat_poly_gcd(&rho, &rat_poly_derivative(&rho));
    if gcd.len() > 1 {
        return Err(NormalFormError::UnresolvedMultiplicity(format!(
            "repeated squared eigenvalues: common factor {}",
            rat_poly_to_string(&gcd, "u")
        )));
    }
    let (k_e, k_h) = sturm_root_counts(&rho);
    let nonreal = n - k_e - k_h;
    assert!(nonreal % 2 == 0, "nonreal squared eigenvalues pair up");
    let k_f = nonreal / 2;

    // Block data: split off rational roots, then whatever quadratic factors
    // remain; higher-degree irreducible factors keep their Sturm counts but
    // stay unfactored in the report.
    let mut blocks = Vec::new();
    let q_field = NumberField::rationals();
    let rho_poly: Poly = rho.iter().map(|c| q_field.rational(c.clone())).collect();
    if let Ok(roots) = rational_poly_roots(&q_field, &poly_monic(&q_field, &rho_poly)?) {
        if roots.len() == rho.len() - 1 && roots.iter().all(FieldElem::is_rational) {
            for root in &roots {
                let u = root.rational_part().clone();
                let label = if u.is_negative() {
                    BlockLabel::Elliptic
                } else {
                    BlockLabel::Hyperbolic
                };
                let factor = rat_poly_to_string(&[-u.clone(), BigRational::one()], "u");
                blocks.push(WilliamsonBlock {
                    label,
                    squared_eigenvalue: Some(u),
                    factor,
                });
            }
        }
    }
    if blocks.len() != n {
        // Mixed or irrational factors: report counts against the whole
        // reduced polynomial.
        blocks.clear();
        let factor = rat_poly_to_string(&rho, "u");
        for _ in 0..k_e {
            blocks.push(WilliamsonBlock {
                label: BlockLabel::Elliptic,
                squared_eigenvalue: None,
                factor: factor.clone(),
            });
        }
        for _ in 0..k_h {
            blocks.push(WilliamsonBlock {
                label: BlockLabel::Hyperbolic,
                squared_eigenvalue: None,
                factor: factor.clone(),
            });
        }
        for _ in 0..k_f {
            blocks.push(WilliamsonBlock {
                label: BlockLabel::FocusFocus,
                squared_eigenvalue: None,
                factor: factor.clone(),
            });
        }
    } else {
        // Rational-root path found everything; reconcile with Sturm.
        assert_eq!(
            blocks
                .iter()
                .filter(|b| b.label == BlockLabel::Elliptic)
                .count(),
            k_e
        );
    }
    let _ = field;
    Ok(WilliamsonType {
        elliptic: k_e,
        hyperbolic: k_h,
        focus: k_f,
        blocks,
    })
}

/// Real toric degree of a nondegenerate singularity: hyperbolic blocks
/// rotate nothing on the real space, so only `k_e + k_f` survives.
pub fn real_toric_degree(w: &WilliamsonType) -> usize {
    w.elliptic + w.focus
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rat(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    fn q() -> NumberField {
        NumberField::rationals()
    }

    fn qmat(field: &NumberField, rows: &[&[i64]]) -> FieldMat {
        rows.iter()
            .map(|r| r.iter().map(|&v| field.integer(v)).collect())
            .collect()
    }

    #[test]
    fn split_pure_nilpotent() {
        let f = q();
        let a = qmat(&f, &[&[0, 1], &[0, 0]]);
        let lp = split_linear(&f, &a).unwrap();
        assert!(mat_is_zero(&lp.s));
        assert_eq!(lp.n, a);
        assert_eq!(lp.gamma, vec![f.zero(), f.zero()]);
    }

    #[test]
    fn split_jordan_block() {
        let f = q();
        let a = qmat(&f, &[&[1, 1], &[0, 1]]);
        let lp = split_linear(&f, &a).unwrap();
        assert_eq!(lp.s, mat_identity(&f, 2));
        assert_eq!(lp.n, qmat(&f, &[&[0, 1], &[0, 0]]));
        assert_eq!(lp.gamma, vec![f.one(), f.one()]);
    }

    #[test]
    fn split_rotation_needs_i() {
        let a_rows: &[&[i64]] = &[&[0, -1], &[1, 0]];
        let f = q();
        let a = qmat(&f, a_rows);
        assert!(matches!(
            split_linear(&f, &a),
            Err(NormalFormError::FieldTooSmall { .. })
        ));
        let g = NumberField::gaussian();
        let a = qmat(&g, a_rows);
        let lp = split_linear(&g, &a).unwrap();
        assert_eq!(lp.s, a);
        assert!(mat_is_zero(&lp.n));
        let i = g.basis_elem(1);
        assert_eq!(lp.gamma, vec![g.neg(&i), i.clone()]);
        // Eigenbasis actually diagonalizes.
        let p = lp.eigenbasis.expect("non-diagonal semisimple part");
        let pinv = mat_inverse(&g, &p).unwrap();
        let d = mat_mul(&g, &pinv, &mat_mul(&g, &lp.s, &p));
        assert_eq!(d[0][0], lp.gamma[0]);
        assert_eq!(d[1][1], lp.gamma[1]);
        assert!(d[0][1].is_zero() && d[1][0].is_zero());
    }

    #[test]
    fn split_triangular_distinct_eigenvalues() {
        let f = q();
        let a = qmat(&f, &[&[1, 1], &[0, 2]]);
        let lp = split_linear(&f, &a).unwrap();
        // Distinct eigenvalues: the matrix is already semisimple.
        assert_eq!(lp.s, a);
        assert!(mat_is_zero(&lp.n));
        assert_eq!(lp.gamma, vec![f.one(), f.integer(2)]);
    }

    #[test]
    fn resonance_examples() {
        let f = q();
        // γ = (1, −1): kernel (1,1); component 0 resonant at (2,1).
        let gamma = vec![f.one(), f.integer(-1)];
        let data = resonance_lattice(&f, &gamma, 3).unwrap();
        assert_eq!(data.kernel, vec![vec![BigInt::from(1), BigInt::from(1)]]);
        assert!(data.resonant[0].contains(&vec![2, 1]));
        assert!(data.resonant[0].contains(&vec![1, 0]));
        // γ = (1, 2): component 1 resonant at (2, 0); the frequencies are
        // rationally dependent, so the kernel has rank 1.
        let gamma = vec![f.one(), f.integer(2)];
        let data = resonance_lattice(&f, &gamma, 3).unwrap();
        assert!(data.resonant[1].contains(&vec![2, 0]));
        assert_eq!(data.kernel, vec![vec![BigInt::from(2), BigInt::from(-1)]]);
        // γ = (i, i√2): independent, so only the trivial e_j.
        let sf = NumberField::adjoin_sqrt("sqrt2", rat(2, 1), std::f64::consts::SQRT_2)
            .unwrap()
            .complexified();
        let gamma = vec![sf.parse("i").unwrap(), sf.parse("i*sqrt2").unwrap()];
        let data = resonance_lattice(&sf, &gamma, 4).unwrap();
        assert!(data.kernel.is_empty());
        assert_eq!(data.resonant[0], vec![vec![1, 0]]);
        assert_eq!(data.resonant[1], vec![vec![0, 1]]);
    }

    #[test]
    fn toric_degree_examples() {
        let sf = NumberField::adjoin_sqrt("sqrt2", rat(2, 1), std::f64::consts::SQRT_2).unwrap();
        let s = sf.basis_elem(1);
        // (1, √2): two independent generators.
        let t = toric_degree(&sf, &[sf.one(), s.clone()]);
        assert_eq!(t.degree, 2);
        // (2, 4): one generator diag(1,2) with λ = 2.
        let t = toric_degree(&sf, &[sf.integer(2), sf.integer(4)]);
        assert_eq!(t.degree, 1);
        assert_eq!(t.generators, vec![vec![BigInt::from(1), BigInt::from(2)]]);
        assert_eq!(t.lambdas, vec![sf.integer(2)]);
        // (1+√2, √2): generators diag(1,0), diag(1,1) with λ = (1, √2).
        let gamma = vec![sf.add(&sf.one(), &s), s.clone()];
        let t = toric_degree(&sf, &gamma);
        assert_eq!(t.degree, 2);
        assert_eq!(
            t.generators,
            vec![
                vec![BigInt::from(1), BigInt::from(0)],
                vec![BigInt::from(1), BigInt::from(1)],
            ]
        );
        assert_eq!(t.lambdas, vec![sf.one(), s.clone()]);
        // Exact reconstruction γ_i = Σ_s λ_s·Z_s[i].
        for (i, g) in gamma.iter().enumerate() {
            let mut sum = sf.zero();
            for (lam, z) in t.lambdas.iter().zip(&t.generators) {
                let zi = BigRational::from_integer(z[i].clone());
                sum = sf.add(&sum, &sf.scale(&zi, lam));
            }
            assert_eq!(&sum, g);
        }
        // Minimality: the generators are linearly independent, so the
        // representation is unique, and dropping row s loses γ exactly when
        // λ_s ≠ 0. Every λ must therefore be nonzero.
        for lam in &t.lambdas {
            assert!(!lam.is_zero());
        }
    }

    fn vf_from(field: &NumberField, m: usize, trunc: usize, terms: &[(usize, &[u32], i64)]) -> Vec<FormalSeries> {
        let mut x = vec![FormalSeries::zero(m, trunc); m];
        for &(j, k, c) in terms {
            x[j].add_term(k, field.integer(c)).unwrap();
        }
        x
    }

    #[test]
    fn resonant_input_is_a_fixed_point() {
        let f = q();
        // Linear part diag(1,2); x₁² in component 2 is resonant (1+1 = 2).
        let x = vf_from(&f, 2, 4, &[(0, &[1, 0], 1), (1, &[0, 1], 2), (1, &[2, 0], 1)]);
        let nf = pd_normalize(&f, &x, 4).unwrap();
        assert_eq!(nf.result, x);
        assert!(nf.log.is_empty());
        assert!(!nf.nilpotent_obstruction);
    }

    #[test]
    fn nonresonant_terms_vanish_and_bracket_is_zero() {
        let f = q();
        // Linear part diag(1, 3): degree-2 and -3 monomials are mostly
        // nonresonant; (0,2) in component 0 would need 2·3 − 1 ≠ 0 etc.
        let x = vf_from(
            &f,
            2,
            4,
            &[
                (0, &[1, 0], 1),
                (1, &[0, 1], 3),
                (0, &[0, 2], 5),
                (1, &[2, 0], 7),
                (0, &[2, 1], 2),
            ],
        );
        let nf = pd_normalize(&f, &x, 4).unwrap();
        // Component 1 keeps x₁³ (3·1 = 3) if present; none was given, and
        // every injected term is nonresonant, so only the linear part stays.
        let lin = vf_from(&f, 2, 4, &[(0, &[1, 0], 1), (1, &[0, 1], 3)]);
        for j in 0..2 {
            for (k, c) in nf.result[j].terms() {
                assert_eq!(
                    lin[j].coeff(k, &f),
                    *c,
                    "unexpected surviving term in component {j}"
                );
            }
        }
        // Exact commutation with the semisimple linear field.
        let s_field = vf_from(&f, 2, 4, &[(0, &[1, 0], 1), (1, &[0, 1], 3)]);
        let bracket = vf_bracket(&f, &nf.result, &s_field);
        assert!(bracket.iter().all(FormalSeries::is_zero));
        // Replay soundness.
        let replayed = apply_generator_log(&f, &nf.mode, &nf.working_input, &nf.log, 4);
        assert_eq!(replayed, nf.result);
    }

    #[test]
    fn nilpotent_coupling_is_flagged_and_still_normalizes() {
        let f = q();
        // Jordan block: S = I, N ≠ 0; every degree-2 monomial has
        // ⟨γ,k⟩ − γ_j = 1, so all of them must vanish exactly.
        let x = vf_from(
            &f,
            2,
            3,
            &[
                (0, &[1, 0], 1),
                (0, &[0, 1], 1),
                (1, &[0, 1], 1),
                (0, &[2, 0], 1),
                (1, &[1, 1], 3),
            ],
        );
        let nf = pd_normalize(&f, &x, 3).unwrap();
        assert!(nf.nilpotent_obstruction);
        for j in 0..2 {
            assert!(nf.result[j].degree_part(2).is_zero());
            assert!(nf.result[j].degree_part(3).is_zero());
        }
        let replayed = apply_generator_log(&f, &nf.mode, &nf.working_input, &nf.log, 3);
        assert_eq!(replayed, nf.result);
    }

    #[test]
    fn birkhoff_cubic_oscillator_degree_four_coefficient() {
        let f = q();
        // H = (x²+y²)/2 + x³.
        let mut h = FormalSeries::zero(2, 4);
        h.add_term(&[2, 0], f.rational(rat(1, 2))).unwrap();
        h.add_term(&[0, 2], f.rational(rat(1, 2))).unwrap();
        h.add_term(&[3, 0], f.one()).unwrap();
        let nf = birkhoff_normalize(&f, &h, 1, 4).unwrap();
        let wf = &nf.field;
        // Degree 3 of the normal form vanishes; degree 4 is −(15/4)·I².
        assert!(nf.result[0].degree_part(3).is_zero());
        let ipoly = nf.actions_polynomial.as_ref().expect("paired monomials");
        assert_eq!(ipoly.coeff(&[1], wf), wf.one(), "I coefficient is ω = 1");
        assert_eq!(ipoly.coeff(&[2], wf), wf.rational(rat(-15, 4)));
        // Replay reproduces the normalized series coefficient-for-coefficient.
        let replayed =
            apply_generator_log(wf, &nf.mode, &nf.working_input, &nf.log, 4);
        assert_eq!(replayed, nf.result);
    }

    #[test]
    fn birkhoff_two_dof_keeps_only_action_terms() {
        let f = q();
        // H = I₁ + 2·I₂ + x₁²x₂ — resonant 1:2 detunings exist but the
        // injected cubic is nonresonant, so degree 3 and 4 stay paired…
        // with ω = (1, 2) the monomial ζ₁²η₂ has detuning 2·1 − 2 = 0:
        // genuinely resonant terms survive and the action polynomial is
        // refused. Use ω = (1, 3) for a clean nonresonant case instead.
        let mut h = FormalSeries::zero(4, 4);
        h.add_term(&[2, 0, 0, 0], f.rational(rat(1, 2))).unwrap();
        h.add_term(&[0, 0, 2, 0], f.rational(rat(1, 2))).unwrap();
        h.add_term(&[0, 2, 0, 0], f.rational(rat(3, 2))).unwrap();
        h.add_term(&[0, 0, 0, 2], f.rational(rat(3, 2))).unwrap();
        h.add_term(&[2, 1, 0, 0], f.one()).unwrap();
        let nf = birkhoff_normalize(&f, &h, 2, 4).unwrap();
        let ipoly = nf.actions_polynomial.as_ref().expect("nonresonant ω");
        let wf = &nf.field;
        assert_eq!(ipoly.coeff(&[1, 0], wf), wf.one());
        assert_eq!(ipoly.coeff(&[0, 1], wf), wf.integer(3));
        assert!(nf.result[0].degree_part(3).is_zero());
        for (k, c) in ipoly.terms() {
            assert!(wf.is_real(c), "action coefficient must be real: {k:?}");
        }
    }

    #[test]
    fn williamson_canonical_examples() {
        let f = q();
        // Elliptic: (x²+y²)/2 → (1,0,0).
        let mut h = FormalSeries::zero(2, 2);
        h.add_term(&[2, 0], f.rational(rat(1, 2))).unwrap();
        h.add_term(&[0, 2], f.rational(rat(1, 2))).unwrap();
        let w = williamson_classify(&f, &h).unwrap();
        assert_eq!((w.elliptic, w.hyperbolic, w.focus), (1, 0, 0));
        assert_eq!(real_toric_degree(&w), 1);
        assert_eq!(w.blocks[0].label, BlockLabel::Elliptic);
        assert_eq!(w.blocks[0].squared_eigenvalue, Some(rat(-1, 1)));

        // Hyperbolic + elliptic: x₁y₁ + (x₂²+y₂²)/2 → (1,1,0).
        // Variables ordered (x₁, x₂, y₁, y₂).
        let mut h = FormalSeries::zero(4, 2);
        h.add_term(&[1, 0, 1, 0], f.one()).unwrap();
        h.add_term(&[0, 2, 0, 0], f.rational(rat(1, 2))).unwrap();
        h.add_term(&[0, 0, 0, 2], f.rational(rat(1, 2))).unwrap();
        let w = williamson_classify(&f, &h).unwrap();
        assert_eq!((w.elliptic, w.hyperbolic, w.focus), (1, 1, 0));
        assert_eq!(real_toric_degree(&w), 1);

        // Focus-focus: x₁y₁ + x₂y₂ + x₁y₂ − x₂y₁ → (0,0,1).
        let mut h = FormalSeries::zero(4, 2);
        h.add_term(&[1, 0, 1, 0], f.one()).unwrap();
        h.add_term(&[0, 1, 0, 1], f.one()).unwrap();
        h.add_term(&[1, 0, 0, 1], f.one()).unwrap();
        h.add_term(&[0, 1, 1, 0], f.integer(-1)).unwrap();
        let w = williamson_classify(&f, &h).unwrap();
        assert_eq!((w.elliptic, w.hyperbolic, w.focus), (0, 0, 1));
        assert_eq!(real_toric_degree(&w), 1);
        assert_eq!(w.blocks.len(), 1);
        assert_eq!(w.blocks[0].label, BlockLabel::FocusFocus);
    }

    #[test]
    fn williamson_rejects_degenerate_and_repeated() {
        let f = q();
        // H = x²/2 alone: Hessian has a zero block → zero eigenvalue.
        let mut h = FormalSeries::zero(2, 2);
        h.add_term(&[2, 0], f.rational(rat(1, 2))).unwrap();
        assert!(matches!(
            williamson_classify(&f, &h),
            Err(NormalFormError::DegenerateQuadraticPart(_))
        ));
        // Two equal elliptic blocks: ρ(u) = (u+1)².
        let mut h = FormalSeries::zero(4, 2);
        for k in [[2, 0, 0, 0], [0, 2, 0, 0], [0, 0, 2, 0], [0, 0, 0, 2]] {
            h.add_term(&k, f.rational(rat(1, 2))).unwrap();
        }
        assert!(matches!(
            williamson_classify(&f, &h),
            Err(NormalFormError::UnresolvedMultiplicity(_))
        ));
    }

    #[test]
    fn sqrt_search_covers_rationals_surds_and_i() {
        let f = NumberField::adjoin_sqrt("sqrt2", rat(2, 1), std::f64::consts::SQRT_2)
            .unwrap()
            .complexified();
        assert_eq!(sqrt_in_field(&f, &rat(9, 4)), Some(f.rational(rat(3, 2))));
        let s = sqrt_in_field(&f, &rat(8, 1)).unwrap();
        assert_eq!(f.mul(&s, &s), f.integer(8));
        let s = sqrt_in_field(&f, &rat(-4, 1)).unwrap();
        assert_eq!(f.mul(&s, &s), f.integer(-4));
        let s = sqrt_in_field(&f, &rat(-2, 1)).unwrap();
        assert_eq!(f.mul(&s, &s), f.integer(-2));
        assert_eq!(sqrt_in_field(&f, &rat(3, 1)), None);
    }

    #[test]
    fn split_one_plus_sqrt2_pair() {
        // Companion-style matrix of t² − 2t − 1 with roots 1 ± √2.
        let sf = NumberField::adjoin_sqrt("sqrt2", rat(2, 1), std::f64::consts::SQRT_2).unwrap();
        let a = qmat(&sf, &[&[0, 1], &[1, 2]]);
        let lp = split_linear(&sf, &a).unwrap();
        assert!(mat_is_zero(&lp.n));
        let s = sf.basis_elem(1);
        assert_eq!(lp.gamma[0], sf.sub(&sf.one(), &s));
        assert_eq!(lp.gamma[1], sf.add(&sf.one(), &s));
    }
}
