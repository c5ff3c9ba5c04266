//! Exact linear algebra on small rational and integer matrices
//! (Gauss-Jordan with first-nonzero pivoting; Hermite reduction over Z).
//! Used for constant-coefficient structure solves and resonance lattices;
//! sizes are the manifold dimension, so cubic elimination is fine.

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{Signed, Zero};

pub(crate) type RatMat = Vec<Vec<BigRational>>;

pub(crate) fn zeros(rows: usize, cols: usize) -> RatMat {
    (0..rows).map(|_| vec![BigRational::zero(); cols]).collect()
}

pub(crate) fn identity(n: usize) -> RatMat {
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        BigRational::from_integer(1.into())
                    } else {
                        BigRational::zero()
                    }
                })
                .collect()
        })
        .collect()
}

/// Exact inverse, or `None` when the matrix is singular.
pub(crate) fn inverse(m: &RatMat) -> Option<RatMat> {
    let n = m.len();
    let mut a = m.to_vec();
    let mut inv = identity(n);
    for col in 0..n {
        let pivot = (col..n).find(|&r| !a[r][col].is_zero())?;
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let p = a[col][col].clone();
        for j in 0..n {
            a[col][j] /= &p;
            inv[col][j] /= &p;
        }
        for r in 0..n {
            if r != col && !a[r][col].is_zero() {
                let f = a[r][col].clone();
                for j in 0..n {
                    let t = &a[col][j] * &f;
                    a[r][j] -= t;
                    let t = &inv[col][j] * &f;
                    inv[r][j] -= t;
                }
            }
        }
    }
    Some(inv)
}

/// Row rank by Gaussian elimination.
pub(crate) fn rank(m: &RatMat) -> usize {
    let rows = m.len();
    if rows == 0 {
        return 0;
    }
    let cols = m[0].len();
    let mut a = m.to_vec();
    let mut r = 0;
    for c in 0..cols {
        let Some(pivot) = (r..rows).find(|&i| !a[i][c].is_zero()) else {
            continue;
        };
        a.swap(r, pivot);
        for i in 0..rows {
            if i != r && !a[i][c].is_zero() {
                let f = &a[i][c] / &a[r][c];
                for j in c..cols {
                    let t = &a[r][j] * &f;
                    a[i][j] -= t;
                }
            }
        }
        r += 1;
        if r == rows {
            break;
        }
    }
    r
}

/// Expresses every row of `m` in terms of the rows indexed by `basis`
/// (assumed independent and spanning): returns `w` with
/// `m[l] = Σ_s w[l][s]·m[basis[s]]`, or `None` if some row falls outside
/// the span.
pub(crate) fn express_rows(m: &RatMat, basis: &[usize]) -> Option<Vec<Vec<BigRational>>> {
    let cols = m.first().map_or(0, Vec::len);
    // Solve bᵀ·w = rowᵀ for each row by elimination on the transposed
    // basis-row matrix with the row as right-hand side.
    let mut out = Vec::with_capacity(m.len());
    for row in m {
        let mut a: Vec<Vec<BigRational>> = (0..cols)
            .map(|c| {
                let mut v: Vec<BigRational> =
                    basis.iter().map(|&s| m[s][c].clone()).collect();
                v.push(row[c].clone());
                v
            })
            .collect();
        let n = basis.len();
        let mut piv_rows = Vec::new();
        let mut r = 0;
        for c in 0..n {
            let Some(p) = (r..cols).find(|&i| !a[i][c].is_zero()) else {
                continue;
            };
            a.swap(r, p);
            let lead = a[r][c].clone();
            for j in 0..=n {
                a[r][j] /= &lead;
            }
            for i in 0..cols {
                if i != r && !a[i][c].is_zero() {
                    let f = a[i][c].clone();
                    for j in 0..=n {
                        let t = &a[r][j] * &f;
                        a[i][j] -= t;
                    }
                }
            }
            piv_rows.push((r, c));
            r += 1;
        }
        // Any leftover nonzero right-hand side means the row is outside.
        if a[r..].iter().any(|rw| !rw[n].is_zero()) {
            return None;
        }
        let mut w = vec![BigRational::zero(); n];
        for (rr, c) in piv_rows {
            w[c] = a[rr][n].clone();
        }
        out.push(w);
    }
    Some(out)
}

pub(crate) type IntMat = Vec<Vec<BigInt>>;

/// Scales a rational vector to the primitive integer vector spanning the
/// same ray, first nonzero entry positive. Returns the vector and the
/// rational factor `c` with `input = c·output`. Zero maps to zero with
/// factor 1.
pub(crate) fn primitive_integer(row: &[BigRational]) -> (Vec<BigInt>, BigRational) {
    let mut denom_lcm = BigInt::from(1);
    for q in row {
        if !q.is_zero() {
            denom_lcm = denom_lcm.lcm(q.denom());
        }
    }
    let ints: Vec<BigInt> = row
        .iter()
        .map(|q| q.numer() * (&denom_lcm / q.denom()))
        .collect();
    let mut content = BigInt::zero();
    for v in &ints {
        content = content.gcd(v);
    }
    if content.is_zero() {
        return (ints, BigRational::from_integer(1.into()));
    }
    let sign = ints
        .iter()
        .find(|v| !v.is_zero())
        .map(|v| if v.is_negative() { -1 } else { 1 })
        .unwrap_or(1);
    let scale = &content * BigInt::from(sign);
    let out: Vec<BigInt> = ints.iter().map(|v| v / &scale).collect();
    (out, BigRational::new(scale, denom_lcm))
}

/// Row-style Hermite normal form: nonzero rows first with strictly
/// right-moving positive pivots, entries above a pivot reduced into
/// `[0, pivot)`. Canonical representative of the row lattice.
pub(crate) fn hnf_rows(m: &IntMat) -> IntMat {
    let rows = m.len();
    let cols = m.first().map_or(0, Vec::len);
    let mut a = m.to_vec();
    let mut r = 0;
    for c in 0..cols {
        if r >= rows {
            break;
        }
        // Euclid on the column below r until one nonzero entry remains.
        loop {
            let mut idx: Vec<usize> = (r..rows).filter(|&i| !a[i][c].is_zero()).collect();
            if idx.is_empty() {
                break;
            }
            if idx.len() == 1 {
                a.swap(r, idx[0]);
                break;
            }
            idx.sort_by_key(|&i| a[i][c].abs());
            let (small, big) = (idx[0], idx[1]);
            let q = a[big][c].div_floor(&a[small][c]);
            for j in 0..cols {
                let t = &a[small][j] * &q;
                a[big][j] -= t;
            }
        }
        if a[r][c].is_zero() {
            continue;
        }
        if a[r][c].is_negative() {
            for j in 0..cols {
                a[r][j] = -a[r][j].clone();
            }
        }
        for i in 0..r {
            if !a[i][c].is_zero() {
                let q = a[i][c].div_floor(&a[r][c]);
                for j in 0..cols {
                    let t = &a[r][j] * &q;
                    a[i][j] -= t;
                }
            }
        }
        r += 1;
    }
    a.truncate(r);
    a
}

/// Z-basis of `{k ∈ Z^m : A·k = 0}` for an integer matrix `A`, by column
/// Hermite reduction of `A` with a unimodular column transform carried
/// alongside; the carried columns under the zero columns of the reduced
/// matrix form the kernel basis. Returned Hermite-reduced row-wise.
pub(crate) fn int_kernel(a: &IntMat) -> IntMat {
    let rows = a.len();
    let cols = a.first().map_or(0, Vec::len);
    let mut w = a.to_vec();
    let mut u: IntMat = (0..cols)
        .map(|i| {
            (0..cols)
                .map(|j| BigInt::from((i == j) as i64))
                .collect()
        })
        .collect();
    let mut c = 0;
    for r in 0..rows {
        if c >= cols {
            break;
        }
        loop {
            let mut idx: Vec<usize> = (c..cols).filter(|&j| !w[r][j].is_zero()).collect();
            if idx.is_empty() {
                break;
            }
            if idx.len() == 1 {
                for row in w.iter_mut() {
                    row.swap(c, idx[0]);
                }
                for row in u.iter_mut() {
                    row.swap(c, idx[0]);
                }
                break;
            }
            idx.sort_by_key(|&j| w[r][j].abs());
            let (small, big) = (idx[0], idx[1]);
            let q = w[r][big].div_floor(&w[r][small]);
            for row in w.iter_mut() {
                let t = &row[small] * &q;
                row[big] -= t;
            }
            for row in u.iter_mut() {
                let t = &row[small] * &q;
                row[big] -= t;
            }
        }
        if !w[r][c].is_zero() {
            c += 1;
        }
    }
    let kernel: IntMat = (c..cols)
        .map(|j| u.iter().map(|row| row[j].clone()).collect())
        .collect();
    hnf_rows(&kernel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rat(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    #[test]
    fn inverse_of_symplectic_block() {
        let m = vec![vec![rat(0, 1), rat(1, 1)], vec![rat(-1, 1), rat(0, 1)]];
        let inv = inverse(&m).unwrap();
        assert_eq!(inv, vec![vec![rat(0, 1), rat(-1, 1)], vec![rat(1, 1), rat(0, 1)]]);
    }

    #[test]
    fn singular_returns_none() {
        let m = vec![vec![rat(1, 1), rat(2, 1)], vec![rat(2, 1), rat(4, 1)]];
        assert!(inverse(&m).is_none());
    }

    #[test]
    fn rank_counts_independent_rows() {
        let m = vec![
            vec![rat(1, 2), rat(1, 1)],
            vec![rat(1, 1), rat(2, 1)],
            vec![rat(0, 1), rat(1, 3)],
        ];
        assert_eq!(rank(&m), 2);
        assert_eq!(rank(&vec![vec![rat(0, 1); 3]; 2]), 0);
    }

    #[test]
    fn express_rows_in_selected_basis() {
        let m = vec![
            vec![rat(1, 1), rat(0, 1)],
            vec![rat(1, 1), rat(1, 1)],
            vec![rat(3, 1), rat(2, 1)],
        ];
        let w = express_rows(&m, &[0, 1]).unwrap();
        assert_eq!(w[2], vec![rat(1, 1), rat(2, 1)]);
        assert_eq!(w[0], vec![rat(1, 1), rat(0, 1)]);
        // A row outside the span of a 1-row basis is rejected.
        assert!(express_rows(&m, &[0]).is_none());
    }

    #[test]
    fn primitive_scaling_clears_denominators() {
        let (v, c) = primitive_integer(&[rat(-2, 3), rat(-4, 3)]);
        assert_eq!(v, vec![BigInt::from(1), BigInt::from(2)]);
        assert_eq!(c, rat(-2, 3));
        let (z, cz) = primitive_integer(&[rat(0, 1), rat(0, 1)]);
        assert!(z.iter().all(Zero::is_zero) && cz == rat(1, 1));
    }

    #[test]
    fn hermite_form_is_canonical() {
        let big = |n: i64| BigInt::from(n);
        // Two bases of the same lattice reduce to the same form.
        let a = vec![vec![big(2), big(1)], vec![big(0), big(3)]];
        let b = vec![vec![big(2), big(4)], vec![big(2), big(1)]];
        let ha = hnf_rows(&a);
        let hb = hnf_rows(&b);
        assert_eq!(ha, hb);
        assert_eq!(ha, vec![vec![big(2), big(1)], vec![big(0), big(3)]]);
    }

    #[test]
    fn integer_kernel_of_resonance_matrix() {
        let big = |n: i64| BigInt::from(n);
        // γ = (1, −1): kernel generated by (1, 1).
        let k = int_kernel(&vec![vec![big(1), big(-1)]]);
        assert_eq!(k, vec![vec![big(1), big(1)]]);
        // γ = (2, 4): kernel generated by (2, −1).
        let k = int_kernel(&vec![vec![big(2), big(4)]]);
        assert_eq!(k, vec![vec![big(2), big(-1)]]);
        // Full-rank square matrix: trivial kernel.
        let k = int_kernel(&vec![vec![big(1), big(0)], vec![big(1), big(1)]]);
        assert!(k.is_empty());
    }
}
