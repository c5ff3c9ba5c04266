//! Multivariate polynomial series with exact coefficients, graded by total
//! degree.
//!
//! A series holds a map from exponent multi-indices `k ∈ Z_{≥0}^m` to
//! [`FieldElem`] coefficients, truncated at a declared total degree: no zero
//! coefficients are stored and no stored degree exceeds the truncation.
//! The exponent map is ordered, so iteration — and therefore every printed
//! form — is deterministic. Arithmetic silently discards products beyond
//! the truncation degree; that is the meaning of working in the truncated
//! polynomial algebra, not data loss.
//!
//! The text form is one line per monomial, `k_1 … k_m : coefficient`,
//! coefficients in the exact [`NumberField`] grammar, monomials ordered by
//! total degree then lexicographically.

use std::collections::BTreeMap;

use num_rational::BigRational;
use thiserror::Error;

use crate::numberfield::{FieldElem, FieldError, NumberField};

#[derive(Debug, Error, PartialEq)]
pub enum SeriesError {
    #[error("exponent vector has {got} entries, series has {expected} variables")]
    ArityMismatch { expected: usize, got: usize },
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Truncated formal power series (a polynomial) over a number field.
#[derive(Clone, Debug, PartialEq)]
pub struct FormalSeries {
    vars: usize,
    trunc: usize,
    terms: BTreeMap<Vec<u32>, FieldElem>,
}

impl FormalSeries {
    pub fn zero(vars: usize, trunc: usize) -> Self {
        FormalSeries {
            vars,
            trunc,
            terms: BTreeMap::new(),
        }
    }

    pub fn vars(&self) -> usize {
        self.vars
    }

    pub fn trunc(&self) -> usize {
        self.trunc
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Vec<u32>, &FieldElem)> {
        self.terms.iter()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Adds `c·x^k` into the series; zero results and monomials beyond the
    /// truncation degree vanish.
    pub fn add_term(&mut self, k: &[u32], c: FieldElem) -> Result<(), SeriesError> {
        if k.len() != self.vars {
            return Err(SeriesError::ArityMismatch {
                expected: self.vars,
                got: k.len(),
            });
        }
        if degree_of(k) > self.trunc || c.is_zero() {
            return Ok(());
        }
        match self.terms.get_mut(k) {
            Some(existing) => {
                let sum = FieldElem(
                    existing
                        .0
                        .iter()
                        .zip(&c.0)
                        .map(|(a, b)| a + b)
                        .collect(),
                );
                if sum.is_zero() {
                    self.terms.remove(k);
                } else {
                    *existing = sum;
                }
            }
            None => {
                self.terms.insert(k.to_vec(), c);
            }
        }
        Ok(())
    }

    pub fn coeff(&self, k: &[u32], field: &NumberField) -> FieldElem {
        self.terms.get(k).cloned().unwrap_or_else(|| field.zero())
    }

    pub fn constant(field: &NumberField, vars: usize, trunc: usize, c: FieldElem) -> Self {
        let mut s = FormalSeries::zero(vars, trunc);
        let k = vec![0; vars];
        let _ = field;
        s.add_term(&k, c).expect("arity is consistent");
        s
    }

    /// The variable `x_j` as a series.
    pub fn variable(field: &NumberField, vars: usize, trunc: usize, j: usize) -> Self {
        let mut s = FormalSeries::zero(vars, trunc);
        let mut k = vec![0; vars];
        k[j] = 1;
        s.add_term(&k, field.one()).expect("arity is consistent");
        s
    }

    pub fn add(&self, other: &FormalSeries, field: &NumberField) -> FormalSeries {
        let mut out = self.clone();
        for (k, c) in &other.terms {
            let _ = field;
            out.add_term(k, c.clone()).expect("same arity");
        }
        out
    }

    pub fn sub(&self, other: &FormalSeries, field: &NumberField) -> FormalSeries {
        self.add(&other.neg(field), field)
    }

    pub fn neg(&self, field: &NumberField) -> FormalSeries {
        let mut out = FormalSeries::zero(self.vars, self.trunc);
        for (k, c) in &self.terms {
            out.terms.insert(k.clone(), field.neg(c));
        }
        out
    }

    pub fn scale(&self, c: &FieldElem, field: &NumberField) -> FormalSeries {
        let mut out = FormalSeries::zero(self.vars, self.trunc);
        for (k, v) in &self.terms {
            let p = field.mul(c, v);
            if !p.is_zero() {
                out.terms.insert(k.clone(), p);
            }
        }
        out
    }

    pub fn scale_rational(&self, q: &BigRational, field: &NumberField) -> FormalSeries {
        self.scale(&field.rational(q.clone()), field)
    }

    pub fn mul(&self, other: &FormalSeries, field: &NumberField) -> FormalSeries {
        let mut out = FormalSeries::zero(self.vars, self.trunc.min(other.trunc));
        for (ka, ca) in &self.terms {
            let da = degree_of(ka);
            for (kb, cb) in &other.terms {
                if da + degree_of(kb) > out.trunc {
                    continue;
                }
                let k: Vec<u32> = ka.iter().zip(kb).map(|(a, b)| a + b).collect();
                out.add_term(&k, field.mul(ca, cb)).expect("same arity");
            }
        }
        out
    }

    /// ∂/∂x_j, exact.
    pub fn partial(&self, j: usize, field: &NumberField) -> FormalSeries {
        let mut out = FormalSeries::zero(self.vars, self.trunc);
        for (k, c) in &self.terms {
            if k[j] == 0 {
                continue;
            }
            let mut kd = k.clone();
            kd[j] -= 1;
            let factor = field.rational(BigRational::from_integer(k[j].into()));
            out.add_term(&kd, field.mul(&factor, c)).expect("same arity");
        }
        out
    }

    /// The homogeneous part of total degree `r`.
    pub fn degree_part(&self, r: usize) -> FormalSeries {
        let mut out = FormalSeries::zero(self.vars, self.trunc);
        for (k, c) in &self.terms {
            if degree_of(k) == r {
                out.terms.insert(k.clone(), c.clone());
            }
        }
        out
    }

    pub fn max_degree(&self) -> usize {
        self.terms.keys().map(|k| degree_of(k)).max().unwrap_or(0)
    }

    pub fn min_degree(&self) -> Option<usize> {
        self.terms.keys().map(|k| degree_of(k)).min()
    }

    /// Re-truncates to a (possibly lower) degree.
    pub fn truncated(&self, trunc: usize) -> FormalSeries {
        let mut out = FormalSeries::zero(self.vars, trunc);
        for (k, c) in &self.terms {
            if degree_of(k) <= trunc {
                out.terms.insert(k.clone(), c.clone());
            }
        }
        out
    }

    /// Substitutes `x_i ← Σ_j A[i][j]·x_j` (a linear change of variables).
    /// `A` is `vars × new_vars`; the result lives in `new_vars` variables.
    pub fn linear_substitute(&self, a: &[Vec<FieldElem>], field: &NumberField) -> FormalSeries {
        assert_eq!(a.len(), self.vars, "substitution rows must match variables");
        let new_vars = a.first().map_or(self.vars, Vec::len);
        // Images of each variable, then monomial-by-monomial products;
        // power caching keeps the cost linear in the exponent.
        let images: Vec<FormalSeries> = (0..self.vars)
            .map(|i| {
                let mut s = FormalSeries::zero(new_vars, self.trunc);
                for (j, c) in a[i].iter().enumerate() {
                    let mut k = vec![0u32; new_vars];
                    k[j] = 1;
                    s.add_term(&k, c.clone()).expect("same arity");
                }
                s
            })
            .collect();
        let mut out = FormalSeries::zero(new_vars, self.trunc);
        for (k, c) in &self.terms {
            let mut term = FormalSeries::constant(field, new_vars, self.trunc, c.clone());
            for (i, &e) in k.iter().enumerate() {
                for _ in 0..e {
                    term = term.mul(&images[i], field);
                }
            }
            out = out.add(&term, field);
        }
        out
    }

    /// Canonical Poisson bracket `Σ_j ∂f/∂x_{aj} ∂g/∂x_{bj} − ∂f/∂x_{bj}
    /// ∂g/∂x_{aj}` over the given conjugate index pairs.
    pub fn poisson(
        &self,
        other: &FormalSeries,
        pairs: &[(usize, usize)],
        field: &NumberField,
    ) -> FormalSeries {
        let mut out = FormalSeries::zero(self.vars, self.trunc.min(other.trunc));
        for &(a, b) in pairs {
            let t1 = self.partial(a, field).mul(&other.partial(b, field), field);
            let t2 = self.partial(b, field).mul(&other.partial(a, field), field);
            out = out.add(&t1.sub(&t2, field), field);
        }
        out
    }

    /// One line per monomial: `k_1 … k_m : coefficient`, degree-major order.
    pub fn to_text(&self, field: &NumberField) -> String {
        let mut keys: Vec<&Vec<u32>> = self.terms.keys().collect();
        keys.sort_by_key(|k| (degree_of(k), (*k).clone()));
        let mut out = String::new();
        for k in keys {
            let exps: Vec<String> = k.iter().map(u32::to_string).collect();
            out.push_str(&exps.join(" "));
            out.push_str(" : ");
            out.push_str(&field.format(&self.terms[k]));
            out.push('\n');
        }
        out
    }

    /// Parses the [`to_text`](Self::to_text) format; blank lines and `#`
    /// comments are skipped.
    pub fn from_text(
        text: &str,
        vars: usize,
        trunc: usize,
        field: &NumberField,
    ) -> Result<FormalSeries, SeriesError> {
        let mut out = FormalSeries::zero(vars, trunc);
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (exps, coeff) = line.split_once(':').ok_or_else(|| SeriesError::Parse {
                line: idx + 1,
                detail: "missing `:`".into(),
            })?;
            let k: Vec<u32> = exps
                .split_whitespace()
                .map(|t| {
                    t.parse().map_err(|_| SeriesError::Parse {
                        line: idx + 1,
                        detail: format!("bad exponent `{t}`"),
                    })
                })
                .collect::<Result<_, _>>()?;
            if k.len() != vars {
                return Err(SeriesError::Parse {
                    line: idx + 1,
                    detail: format!("expected {vars} exponents, got {}", k.len()),
                });
            }
            let c = field.parse(coeff.trim())?;
            out.add_term(&k, c)?;
        }
        Ok(out)
    }

    /// Numeric evaluation through the approximate embedding; real part
    /// only. For plots and spot checks, never for exact decisions.
    pub fn eval_f64(&self, x: &[f64], field: &NumberField) -> f64 {
        let mut sum = 0.0;
        for (k, c) in &self.terms {
            let mut mono = 1.0;
            for (i, &e) in k.iter().enumerate() {
                mono *= x[i].powi(e as i32);
            }
            sum += field.embed(c).0 * mono;
        }
        sum
    }
}

pub fn degree_of(k: &[u32]) -> usize {
    k.iter().map(|&e| e as usize).sum()
}

/// All exponent vectors in `m` variables of total degree exactly `r`,
/// lexicographically ordered.
pub fn monomials_of_degree(m: usize, r: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut k = vec![0u32; m];
    fill(&mut out, &mut k, 0, r);
    out
}

fn fill(out: &mut Vec<Vec<u32>>, k: &mut Vec<u32>, pos: usize, left: usize) {
    if pos + 1 == k.len() {
        k[pos] = left as u32;
        out.push(k.clone());
        k[pos] = 0;
        return;
    }
    for e in 0..=left {
        k[pos] = e as u32;
        fill(out, k, pos + 1, left - e);
    }
    k[pos] = 0;
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigInt;

    fn rat(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    fn q() -> NumberField {
        NumberField::rationals()
    }

    #[test]
    fn product_truncates_and_drops_zeros() {
        let f = q();
        // (1 + x)·(1 − x) = 1 − x² ; at truncation 1 the product is 1.
        let mut a = FormalSeries::zero(1, 2);
        a.add_term(&[0], f.one()).unwrap();
        a.add_term(&[1], f.one()).unwrap();
        let mut b = FormalSeries::zero(1, 2);
        b.add_term(&[0], f.one()).unwrap();
        b.add_term(&[1], f.integer(-1)).unwrap();
        let p = a.mul(&b, &f);
        assert_eq!(p.coeff(&[0], &f), f.one());
        assert_eq!(p.coeff(&[1], &f), f.zero());
        assert_eq!(p.coeff(&[2], &f), f.integer(-1));
        assert_eq!(p.len(), 2);
        let p1 = a.truncated(1).mul(&b.truncated(1), &f);
        assert_eq!(p1.len(), 1);
    }

    #[test]
    fn partial_derivative_is_exact() {
        let f = q();
        let mut s = FormalSeries::zero(2, 4);
        s.add_term(&[3, 1], f.rational(rat(1, 2))).unwrap();
        let d = s.partial(0, &f);
        assert_eq!(d.coeff(&[2, 1], &f), f.rational(rat(3, 2)));
    }

    #[test]
    fn poisson_bracket_of_conjugate_pair() {
        let f = q();
        let x = FormalSeries::variable(&f, 2, 3, 0);
        let y = FormalSeries::variable(&f, 2, 3, 1);
        let b = x.poisson(&y, &[(0, 1)], &f);
        assert_eq!(b.coeff(&[0, 0], &f), f.one());
        assert_eq!(b.len(), 1);
        // {H, x} with H = (x²+y²)/2 is −... : y·{x,x} parts vanish; the
        // bracket of H with x is −y under ∂x∂y − ∂y∂x ordering: check sign.
        let h = x.mul(&x, &f).add(&y.mul(&y, &f), &f).scale(&f.rational(rat(1, 2)), &f);
        let hb = h.poisson(&x, &[(0, 1)], &f);
        assert_eq!(hb.coeff(&[0, 1], &f), f.integer(-1));
    }

    #[test]
    fn linear_substitution_rotates_quadratic() {
        // x²+y² is invariant under the complex pairing x = u+v, y = i(u−v)
        // over Q(i): (u+v)² − (u−v)² ... with i² = −1 the image is 4uv.
        let f = NumberField::gaussian();
        let i = f.basis_elem(1);
        let mut s = FormalSeries::zero(2, 2);
        s.add_term(&[2, 0], f.one()).unwrap();
        s.add_term(&[0, 2], f.one()).unwrap();
        let a = vec![
            vec![f.one(), f.one()],
            vec![i.clone(), f.neg(&i)],
        ];
        let image = s.linear_substitute(&a, &f);
        assert_eq!(image.coeff(&[1, 1], &f), f.integer(4));
        assert_eq!(image.len(), 1);
    }

    #[test]
    fn text_round_trip_is_identity() {
        let f = NumberField::adjoin_sqrt("sqrt2", rat(2, 1), std::f64::consts::SQRT_2)
            .unwrap()
            .complexified();
        let mut s = FormalSeries::zero(3, 4);
        s.add_term(&[2, 0, 1], f.parse("1/2 - i*sqrt2").unwrap()).unwrap();
        s.add_term(&[0, 0, 0], f.integer(-3)).unwrap();
        s.add_term(&[1, 1, 0], f.parse("sqrt2").unwrap()).unwrap();
        let text = s.to_text(&f);
        let back = FormalSeries::from_text(&text, 3, 4, &f).unwrap();
        assert_eq!(back, s);
        // Degree-major ordering in the printed form.
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("0 0 0"));
        assert!(lines[1].starts_with("1 1 0"));
        assert!(lines[2].starts_with("2 0 1"));
    }

    #[test]
    fn monomial_enumeration_counts() {
        // C(r+m−1, m−1) monomials of degree r in m variables.
        assert_eq!(monomials_of_degree(2, 3).len(), 4);
        assert_eq!(monomials_of_degree(3, 4).len(), 15);
        let ms = monomials_of_degree(2, 2);
        assert_eq!(ms, vec![vec![0, 2], vec![1, 1], vec![2, 0]]);
    }
}
