//! Differential 2-forms, Poisson bivectors, general tensor fields, and the
//! operations tying them to dynamics: Hamiltonian vector fields, brackets,
//! Lie derivatives, and the Jacobi identity check.
//!
//! Index conventions, fixed once and used everywhere:
//!
//! * contraction of a vector into a 2-form: `(X ⌟ ω)_b = Σ_a X^a ω_{ab}`;
//! * contraction of a differential into a bivector:
//!   `(dH ⌟ Π)^a = Σ_b Π^{ab} ∂_b H`;
//! * a Hamiltonian field of a 2-form solves `X ⌟ ω = −dH`, of a bivector is
//!   `X = dH ⌟ Π`;
//! * the bracket is `{H, G} = X_H(G)`, equivalently
//!   `{f, g} = Σ_{a,b} Π^{ab} (∂_b f)(∂_a g)`.
//!
//! Under these rules the constant structure with `{x_a, x_b} = 1` has matrix
//! entries `Π^{ba} = 1, Π^{ab} = −1` (see [`PoissonBivector::canonical_pair`])
//! and is the literal matrix inverse of the 2-form `dx_a ∧ dx_b`; both give
//! the familiar rotation `X = (−y, x)` for `H = (x² + y²)/2`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::expr::{
    diff_expr, fold_add, fold_mul, fold_neg, fold_sub, print_expr_generic, simplify, CompiledExpr,
    EvalError, Expr, IrrationalBasis,
};
use crate::ratmat;

/// Relative singular-value cutoff: values below `1e-12 * largest` count as
/// zero when ranking degenerate structures.
pub const SV_RELATIVE_CUTOFF: f64 = 1e-12;
/// Residual above which a pointwise Hamiltonian solve is inconsistent.
pub const CONSISTENCY_TOL: f64 = 1e-10;
/// Residual above which the contraction `X ⌟ dω` counts as a violation.
pub const STRUCTURE_TOL: f64 = 1e-8;
/// Jacobiator residual at or below this passes [`check_jacobi`].
pub const JACOBI_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("index pair ({0}, {1}) out of range or not strictly increasing")]
    BadIndex(usize, usize),
    #[error("expected {expected} components, got {got}")]
    BadShape { expected: usize, got: usize },
    #[error(
        "-dH is not in the image of the contraction map at {point:?} (residual {residual:.3e})"
    )]
    InconsistentSystem { point: Vec<f64>, residual: f64 },
    #[error("X \u{2320} d\u{03c9} = {residual:.3e} at {point:?}; the field does not preserve the structure")]
    NotStructurePreserving { point: Vec<f64>, residual: f64 },
    #[error("2-form bracket needs constant invertible coefficients; {0}")]
    NotSymbolicallySolvable(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

// ── antisymmetric coefficient storage ───────────────────────────────────────

/// Upper-triangle storage shared by 2-forms and bivectors: entry `(a, b)` with
/// `a < b` holds the symbolic coefficient; the transpose is its negation and
/// the diagonal is zero.
#[derive(Clone, Debug, PartialEq)]
struct AntisymMatrix {
    dim: usize,
    upper: Vec<Expr>,
}

impl AntisymMatrix {
    fn zero(dim: usize) -> Self {
        let n = dim * (dim - 1) / 2;
        AntisymMatrix {
            dim,
            upper: vec![Expr::num_int(0); n],
        }
    }

    fn slot(&self, a: usize, b: usize) -> usize {
        debug_assert!(a < b && b < self.dim);
        a * self.dim - a * (a + 1) / 2 + (b - a - 1)
    }

    fn set(&mut self, a: usize, b: usize, e: Expr) -> Result<(), GeometryError> {
        if a >= b || b >= self.dim {
            return Err(GeometryError::BadIndex(a, b));
        }
        let s = self.slot(a, b);
        self.upper[s] = e;
        Ok(())
    }

    fn entry(&self, a: usize, b: usize) -> Expr {
        if a == b {
            Expr::num_int(0)
        } else if a < b {
            self.upper[self.slot(a, b)].clone()
        } else {
            fold_neg(self.upper[self.slot(b, a)].clone())
        }
    }

    fn eval_matrix(&self, point: &[f64], basis: &IrrationalBasis) -> Result<DMatrix<f64>, EvalError> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for a in 0..self.dim {
            for b in (a + 1)..self.dim {
                let v = self.upper[self.slot(a, b)].eval(point, basis)?;
                m[(a, b)] = v;
                m[(b, a)] = -v;
            }
        }
        Ok(m)
    }

    fn compile(&self, basis: &IrrationalBasis) -> Result<CompiledAntisym, EvalError> {
        Ok(CompiledAntisym {
            dim: self.dim,
            upper: self
                .upper
                .iter()
                .map(|e| e.compile(basis))
                .collect::<Result<_, _>>()?,
        })
    }

    /// Exact rational matrix when every coefficient is a literal.
    fn constant_matrix(&self) -> Option<ratmat::RatMat> {
        let mut m = ratmat::zeros(self.dim, self.dim);
        for a in 0..self.dim {
            for b in (a + 1)..self.dim {
                match &self.upper[self.slot(a, b)] {
                    Expr::Num(r) => {
                        m[a][b] = r.clone();
                        m[b][a] = -r.clone();
                    }
                    e if e.is_zero() => {}
                    _ => return None,
                }
            }
        }
        Some(m)
    }
}

/// Compiled antisymmetric coefficients for inner loops.
#[derive(Clone, Debug)]
pub struct CompiledAntisym {
    dim: usize,
    upper: Vec<CompiledExpr>,
}

impl CompiledAntisym {
    pub fn eval_into(&self, point: &[f64], out: &mut DMatrix<f64>) {
        let mut k = 0;
        for a in 0..self.dim {
            for b in (a + 1)..self.dim {
                let v = self.upper[k].eval(point);
                out[(a, b)] = v;
                out[(b, a)] = -v;
                k += 1;
            }
        }
        for a in 0..self.dim {
            out[(a, a)] = 0.0;
        }
    }
}

// ── 2-forms ─────────────────────────────────────────────────────────────────

/// A differential 2-form `ω = Σ_{a<b} ω_{ab}(x) dx_a ∧ dx_b`, possibly
/// degenerate, possibly non-closed.
#[derive(Clone, Debug, PartialEq)]
pub struct Structure2Form {
    inner: AntisymMatrix,
}

impl Structure2Form {
    pub fn zero(dim: usize) -> Self {
        Structure2Form {
            inner: AntisymMatrix::zero(dim),
        }
    }

    /// Builds from explicit upper-triangle coefficients `(a, b, ω_{ab})`.
    pub fn from_entries(
        dim: usize,
        entries: Vec<(usize, usize, Expr)>,
    ) -> Result<Self, GeometryError> {
        let mut inner = AntisymMatrix::zero(dim);
        for (a, b, e) in entries {
            inner.set(a, b, e)?;
        }
        Ok(Structure2Form { inner })
    }

    /// The constant symplectic form `Σ dx_a ∧ dx_b` over the given index
    /// pairs, e.g. `[(0, 1), (2, 3)]` for canonical coordinates grouped as
    /// `(x1, y1, x2, y2)`.
    pub fn canonical_pairs(dim: usize, pairs: &[(usize, usize)]) -> Result<Self, GeometryError> {
        let mut inner = AntisymMatrix::zero(dim);
        for &(a, b) in pairs {
            if a < b {
                inner.set(a, b, Expr::num_int(1))?;
            } else {
                inner.set(b, a, Expr::num_int(-1))?;
            }
        }
        Ok(Structure2Form { inner })
    }

    pub fn dim(&self) -> usize {
        self.inner.dim
    }

    /// Coefficient `ω_{ab}` for any index pair.
    pub fn entry(&self, a: usize, b: usize) -> Expr {
        self.inner.entry(a, b)
    }

    pub fn eval_matrix(&self, point: &[f64], basis: &IrrationalBasis) -> Result<DMatrix<f64>, EvalError> {
        self.inner.eval_matrix(point, basis)
    }

    pub fn compile(&self, basis: &IrrationalBasis) -> Result<CompiledAntisym, EvalError> {
        self.inner.compile(basis)
    }

    /// `rank ω` at a point under the relative singular value cutoff.
    pub fn rank_at(&self, point: &[f64], basis: &IrrationalBasis) -> Result<usize, EvalError> {
        let m = self.eval_matrix(point, basis)?;
        Ok(numeric_rank(&m))
    }

    /// Components of the exterior derivative:
    /// `(dω)_{abc} = ∂_a ω_{bc} + ∂_b ω_{ca} + ∂_c ω_{ab}` for `a < b < c`,
    /// simplified. Empty in dimension ≤ 2.
    pub fn d_components(&self) -> Vec<(usize, usize, usize, Expr)> {
        let m = self.dim();
        let mut out = Vec::new();
        for a in 0..m {
            for b in (a + 1)..m {
                for c in (b + 1)..m {
                    let term = fold_add(
                        diff_expr(&self.entry(b, c), a),
                        fold_add(
                            diff_expr(&self.entry(c, a), b),
                            diff_expr(&self.entry(a, b), c),
                        ),
                    );
                    out.push((a, b, c, simplify(&term)));
                }
            }
        }
        out
    }

    /// True when every component of `dω` simplifies to the zero literal.
    /// (A numeric sample check backs this up wherever flows rely on it.)
    pub fn is_symbolically_closed(&self) -> bool {
        self.d_components().iter().all(|(_, _, _, e)| e.is_zero())
    }

    /// `ω(X, Y)` as a symbolic expression.
    pub fn apply(&self, x: &VectorFieldExpr, y: &VectorFieldExpr) -> Expr {
        let mut acc = Expr::num_int(0);
        for a in 0..self.dim() {
            for b in 0..self.dim() {
                if a == b {
                    continue;
                }
                let w = self.entry(a, b);
                if w.is_zero() {
                    continue;
                }
                acc = fold_add(
                    acc,
                    fold_mul(w, fold_mul(x.component(a).clone(), y.component(b).clone())),
                );
            }
        }
        simplify(&acc)
    }
}

// ── Poisson bivectors ───────────────────────────────────────────────────────

/// A bivector field `Π` with antisymmetric coefficient functions `Π^{ab}(x)`.
/// Whether it satisfies the Jacobi identity is checked separately
/// ([`check_jacobi`]); the type itself does not assume it.
#[derive(Clone, Debug, PartialEq)]
pub struct PoissonBivector {
    inner: AntisymMatrix,
}

impl PoissonBivector {
    pub fn zero(dim: usize) -> Self {
        PoissonBivector {
            inner: AntisymMatrix::zero(dim),
        }
    }

    /// Builds from explicit upper-triangle coefficients `(a, b, Π^{ab})`.
    pub fn from_entries(
        dim: usize,
        entries: Vec<(usize, usize, Expr)>,
    ) -> Result<Self, GeometryError> {
        let mut inner = AntisymMatrix::zero(dim);
        for (a, b, e) in entries {
            inner.set(a, b, e)?;
        }
        Ok(PoissonBivector { inner })
    }

    /// The constant bivector with `{x_a, x_b} = 1` for each listed pair and
    /// all other brackets zero. Under this module's contraction convention
    /// that means the matrix entries `Π^{ba} = 1`, `Π^{ab} = −1`.
    pub fn canonical_pairs(dim: usize, pairs: &[(usize, usize)]) -> Result<Self, GeometryError> {
        let mut inner = AntisymMatrix::zero(dim);
        for &(a, b) in pairs {
            if a < b {
                inner.set(a, b, Expr::num_int(-1))?;
            } else {
                inner.set(b, a, Expr::num_int(1))?;
            }
        }
        Ok(PoissonBivector { inner })
    }

    /// Single canonical pair; see [`PoissonBivector::canonical_pairs`].
    pub fn canonical_pair(dim: usize, a: usize, b: usize) -> Result<Self, GeometryError> {
        Self::canonical_pairs(dim, &[(a, b)])
    }

    /// The bivector with `{x_a, x_b} = f` for one pair.
    pub fn scaled_pair(dim: usize, a: usize, b: usize, f: Expr) -> Result<Self, GeometryError> {
        let mut inner = AntisymMatrix::zero(dim);
        if a < b {
            inner.set(a, b, fold_neg(f))?;
        } else {
            inner.set(b, a, f)?;
        }
        Ok(PoissonBivector { inner })
    }

    pub fn dim(&self) -> usize {
        self.inner.dim
    }

    /// Coefficient `Π^{ab}` for any index pair.
    pub fn entry(&self, a: usize, b: usize) -> Expr {
        self.inner.entry(a, b)
    }

    pub fn eval_matrix(&self, point: &[f64], basis: &IrrationalBasis) -> Result<DMatrix<f64>, EvalError> {
        self.inner.eval_matrix(point, basis)
    }

    pub fn compile(&self, basis: &IrrationalBasis) -> Result<CompiledAntisym, EvalError> {
        self.inner.compile(basis)
    }

    pub fn rank_at(&self, point: &[f64], basis: &IrrationalBasis) -> Result<usize, EvalError> {
        let m = self.eval_matrix(point, basis)?;
        Ok(numeric_rank(&m))
    }
}

/// Either structure, for operations defined on both.
#[derive(Clone, Debug)]
pub enum Structure {
    Form(Structure2Form),
    Poisson(PoissonBivector),
}

impl Structure {
    pub fn dim(&self) -> usize {
        match self {
            Structure::Form(w) => w.dim(),
            Structure::Poisson(p) => p.dim(),
        }
    }
}

// ── vector fields ───────────────────────────────────────────────────────────

/// A vector field with symbolic components `X^a(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorFieldExpr {
    components: Vec<Expr>,
}

impl VectorFieldExpr {
    pub fn new(components: Vec<Expr>) -> Self {
        VectorFieldExpr { components }
    }

    pub fn zero(dim: usize) -> Self {
        VectorFieldExpr {
            components: vec![Expr::num_int(0); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn component(&self, a: usize) -> &Expr {
        &self.components[a]
    }

    pub fn components(&self) -> &[Expr] {
        &self.components
    }

    pub fn eval(&self, point: &[f64], basis: &IrrationalBasis) -> Result<Vec<f64>, EvalError> {
        self.components.iter().map(|e| e.eval(point, basis)).collect()
    }

    /// Directional derivative `X(f) = Σ_a X^a ∂_a f`, simplified.
    pub fn apply(&self, f: &Expr) -> Expr {
        let mut acc = Expr::num_int(0);
        for (a, xa) in self.components.iter().enumerate() {
            acc = fold_add(acc, fold_mul(xa.clone(), diff_expr(f, a)));
        }
        simplify(&acc)
    }

    /// Symbolic Jacobian `∂_b X^a`, row index `a`.
    pub fn jacobian(&self) -> Vec<Vec<Expr>> {
        (0..self.dim())
            .map(|a| {
                (0..self.dim())
                    .map(|b| diff_expr(&self.components[a], b))
                    .collect()
            })
            .collect()
    }
}

/// Commutator `[X, Y]^k = Σ_a (X^a ∂_a Y^k − Y^a ∂_a X^k)`, simplified.
pub fn vf_commutator(x: &VectorFieldExpr, y: &VectorFieldExpr) -> VectorFieldExpr {
    let m = x.dim();
    let comps = (0..m)
        .map(|k| {
            let mut acc = Expr::num_int(0);
            for a in 0..m {
                acc = fold_add(
                    acc,
                    fold_sub(
                        fold_mul(x.component(a).clone(), diff_expr(y.component(k), a)),
                        fold_mul(y.component(a).clone(), diff_expr(x.component(k), a)),
                    ),
                );
            }
            simplify(&acc)
        })
        .collect();
    VectorFieldExpr::new(comps)
}

// ── tensor fields ───────────────────────────────────────────────────────────

/// A tensor field with `contra` contravariant and `cov` covariant slots and
/// dense symbolic components; linear index runs over the upper multi-index
/// first, most significant digit leftmost.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorField {
    dim: usize,
    contra: usize,
    cov: usize,
    comps: Vec<Expr>,
}

impl TensorField {
    pub fn zero(dim: usize, contra: usize, cov: usize) -> Self {
        let n = dim.pow((contra + cov) as u32);
        TensorField {
            dim,
            contra,
            cov,
            comps: vec![Expr::num_int(0); n],
        }
    }

    pub fn from_components(
        dim: usize,
        contra: usize,
        cov: usize,
        comps: Vec<Expr>,
    ) -> Result<Self, GeometryError> {
        let expected = dim.pow((contra + cov) as u32);
        if comps.len() != expected {
            return Err(GeometryError::BadShape {
                expected,
                got: comps.len(),
            });
        }
        Ok(TensorField {
            dim,
            contra,
            cov,
            comps,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn contra(&self) -> usize {
        self.contra
    }

    pub fn cov(&self) -> usize {
        self.cov
    }

    pub fn order(&self) -> usize {
        self.contra + self.cov
    }

    pub fn len(&self) -> usize {
        self.comps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.comps.is_empty()
    }

    fn flat(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.order());
        idx.iter().fold(0, |acc, &i| acc * self.dim + i)
    }

    pub fn component(&self, idx: &[usize]) -> &Expr {
        &self.comps[self.flat(idx)]
    }

    pub fn set_component(&mut self, idx: &[usize], e: Expr) {
        let f = self.flat(idx);
        self.comps[f] = e;
    }

    pub fn components(&self) -> &[Expr] {
        &self.comps
    }

    pub fn eval(&self, point: &[f64], basis: &IrrationalBasis) -> Result<Vec<f64>, EvalError> {
        self.comps.iter().map(|e| e.eval(point, basis)).collect()
    }

    pub fn compile(&self, basis: &IrrationalBasis) -> Result<CompiledTensor, EvalError> {
        let mut nonzero = Vec::new();
        for (i, e) in self.comps.iter().enumerate() {
            if !e.is_zero() {
                nonzero.push((i, e.compile(basis)?));
            }
        }
        Ok(CompiledTensor {
            dim: self.dim,
            contra: self.contra,
            cov: self.cov,
            len: self.comps.len(),
            nonzero,
        })
    }

    pub fn from_vector(x: &VectorFieldExpr) -> Self {
        TensorField {
            dim: x.dim(),
            contra: 1,
            cov: 0,
            comps: x.components().to_vec(),
        }
    }

    pub fn from_one_form(dim: usize, comps: Vec<Expr>) -> Result<Self, GeometryError> {
        Self::from_components(dim, 0, 1, comps)
    }

    /// The 2-form as an antisymmetric covariant 2-tensor.
    pub fn from_two_form(w: &Structure2Form) -> Self {
        let m = w.dim();
        let mut t = TensorField::zero(m, 0, 2);
        for a in 0..m {
            for b in 0..m {
                t.set_component(&[a, b], w.entry(a, b));
            }
        }
        t
    }

    /// The bivector as an antisymmetric contravariant 2-tensor.
    pub fn from_bivector(p: &PoissonBivector) -> Self {
        let m = p.dim();
        let mut t = TensorField::zero(m, 2, 0);
        for a in 0..m {
            for b in 0..m {
                t.set_component(&[a, b], p.entry(a, b));
            }
        }
        t
    }

    /// Tensor product; upper slots of `self` come before upper slots of
    /// `other`, likewise for lower slots.
    pub fn tensor_product(&self, other: &TensorField) -> TensorField {
        assert_eq!(self.dim, other.dim);
        let dim = self.dim;
        let contra = self.contra + other.contra;
        let cov = self.cov + other.cov;
        let mut out = TensorField::zero(dim, contra, cov);
        let mut idx = vec![0usize; contra + cov];
        let mut self_idx = vec![0usize; self.order()];
        let mut other_idx = vec![0usize; other.order()];
        loop {
            for (k, v) in idx.iter().enumerate() {
                let (up, pos) = if k < contra { (true, k) } else { (false, k - contra) };
                if up {
                    if pos < self.contra {
                        self_idx[pos] = *v;
                    } else {
                        other_idx[pos - self.contra] = *v;
                    }
                } else if pos < self.cov {
                    self_idx[self.contra + pos] = *v;
                } else {
                    other_idx[other.contra + (pos - self.cov)] = *v;
                }
            }
            let prod = fold_mul(
                self.component(&self_idx).clone(),
                other.component(&other_idx).clone(),
            );
            out.set_component(&idx, simplify(&prod));
            if !advance(&mut idx, dim) {
                break;
            }
        }
        out
    }

    /// Full antisymmetrization of a list of 1-forms:
    /// `α_1 ∧ … ∧ α_k = Σ_σ sgn(σ) α_{σ(1)} ⊗ … ⊗ α_{σ(k)}`.
    pub fn wedge_of_one_forms(dim: usize, forms: &[Vec<Expr>]) -> TensorField {
        let k = forms.len();
        let mut out = TensorField::zero(dim, 0, k);
        let mut idx = vec![0usize; k];
        loop {
            let mut acc = Expr::num_int(0);
            for (sign, perm) in permutations(k) {
                let mut prod = Expr::num_int(1);
                for (slot, &p) in perm.iter().enumerate() {
                    prod = fold_mul(prod, forms[p][idx[slot]].clone());
                }
                acc = if sign > 0 {
                    fold_add(acc, prod)
                } else {
                    fold_sub(acc, prod)
                };
            }
            out.set_component(&idx, simplify(&acc));
            if !advance(&mut idx, dim) {
                break;
            }
        }
        out
    }

    /// Max |component| over the given points.
    pub fn max_abs_at(&self, points: &[Vec<f64>], basis: &IrrationalBasis) -> Result<f64, EvalError> {
        let mut worst: f64 = 0.0;
        for p in points {
            for v in self.eval(p, basis)? {
                worst = worst.max(v.abs());
            }
        }
        Ok(worst)
    }
}

/// Compiled tensor keeping only nonzero components.
#[derive(Clone, Debug)]
pub struct CompiledTensor {
    pub dim: usize,
    pub contra: usize,
    pub cov: usize,
    len: usize,
    nonzero: Vec<(usize, CompiledExpr)>,
}

impl CompiledTensor {
    /// Dense evaluation; zero components stay zero.
    pub fn eval_into(&self, point: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.len);
        out.fill(0.0);
        for (i, e) in &self.nonzero {
            out[*i] = e.eval(point);
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn nonzero(&self) -> &[(usize, CompiledExpr)] {
        &self.nonzero
    }
}

fn advance(idx: &mut [usize], dim: usize) -> bool {
    for k in (0..idx.len()).rev() {
        idx[k] += 1;
        if idx[k] < dim {
            return true;
        }
        idx[k] = 0;
    }
    false
}

/// All permutations of `0..k` with their signs.
fn permutations(k: usize) -> Vec<(i32, Vec<usize>)> {
    let mut out = Vec::new();
    let mut perm: Vec<usize> = (0..k).collect();
    signed_perms(&mut perm, 0, 1, &mut out);
    out
}

fn signed_perms(perm: &mut Vec<usize>, start: usize, sign: i32, out: &mut Vec<(i32, Vec<usize>)>) {
    if start == perm.len() {
        out.push((sign, perm.clone()));
        return;
    }
    for i in start..perm.len() {
        perm.swap(start, i);
        // A transposition of distinct slots flips parity.
        let s = if i == start { sign } else { -sign };
        signed_perms(perm, start + 1, s, out);
        perm.swap(start, i);
    }
}

// ── Hamiltonian vector fields ───────────────────────────────────────────────

/// Result of a 2-form Hamiltonian solve.
#[derive(Clone, Debug)]
pub struct Ham2FormResult {
    pub field: HamiltonianField,
    /// `dim ker ω`, maximal over the sample points.
    pub kernel_dim: usize,
    /// True when the kernel is nontrivial, so the returned field is only the
    /// minimum-norm representative of an affine family.
    pub kernel_ambiguity: bool,
    /// Max over samples of |X ⌟ dω| components; 0.0 when `dω` vanishes
    /// symbolically.
    pub hamilton3_residual: f64,
}

/// A Hamiltonian vector field, symbolic when the structure could be inverted
/// exactly, otherwise a pointwise solver.
#[derive(Clone, Debug)]
pub enum HamiltonianField {
    Symbolic(VectorFieldExpr),
    Pointwise(PointwiseHamiltonianField),
}

impl HamiltonianField {
    pub fn eval(&self, point: &[f64], basis: &IrrationalBasis) -> Result<Vec<f64>, GeometryError> {
        match self {
            HamiltonianField::Symbolic(v) => Ok(v.eval(point, basis)?),
            HamiltonianField::Pointwise(p) => p.solve_at(point, basis),
        }
    }

    pub fn as_symbolic(&self) -> Option<&VectorFieldExpr> {
        match self {
            HamiltonianField::Symbolic(v) => Some(v),
            HamiltonianField::Pointwise(_) => None,
        }
    }
}

/// Solves `(X ⌟ ω)(x) = −dH(x)` afresh at every queried point with a
/// rank-revealing decomposition; minimum-norm in the degenerate case.
#[derive(Clone, Debug)]
pub struct PointwiseHamiltonianField {
    omega: Structure2Form,
    grad: Vec<Expr>,
}

impl PointwiseHamiltonianField {
    pub fn dim(&self) -> usize {
        self.omega.dim()
    }

    pub fn solve_at(&self, point: &[f64], basis: &IrrationalBasis) -> Result<Vec<f64>, GeometryError> {
        let (x, _, residual, _) = solve_pointwise(&self.omega, &self.grad, point, basis)?;
        let scale = 1.0f64.max(norm_inf(&self.grad_eval(point, basis)?));
        if residual > CONSISTENCY_TOL * scale {
            return Err(GeometryError::InconsistentSystem {
                point: point.to_vec(),
                residual,
            });
        }
        Ok(x)
    }

    fn grad_eval(&self, point: &[f64], basis: &IrrationalBasis) -> Result<Vec<f64>, EvalError> {
        self.grad.iter().map(|e| e.eval(point, basis)).collect()
    }
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn numeric_rank(m: &DMatrix<f64>) -> usize {
    let svd = m.clone().svd(false, false);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    if max_sv == 0.0 {
        return 0;
    }
    svd.singular_values
        .iter()
        .filter(|&&s| s > SV_RELATIVE_CUTOFF * max_sv)
        .count()
}

/// One pointwise solve; returns (solution, kernel dim, residual, grad norm).
fn solve_pointwise(
    omega: &Structure2Form,
    grad: &[Expr],
    point: &[f64],
    basis: &IrrationalBasis,
) -> Result<(Vec<f64>, usize, f64, f64), GeometryError> {
    let w = omega.eval_matrix(point, basis)?;
    let g: Vec<f64> = grad
        .iter()
        .map(|e| e.eval(point, basis))
        .collect::<Result<_, _>>()?;
    let b = DVector::from_column_slice(&g);
    // (X ⌟ ω)_b = Σ_a X^a ω_{ab} = −∂_b H  ⟺  ω X = ∇H by antisymmetry.
    let svd = w.clone().svd(true, true);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let eps = SV_RELATIVE_CUTOFF * max_sv.max(f64::MIN_POSITIVE);
    let x = svd
        .solve(&b, eps)
        .map_err(|e| GeometryError::NotSymbolicallySolvable(e.to_string()))?;
    let kernel = w.ncols() - numeric_rank(&w);
    let residual = (&w * &x - &b).amax();
    let gnorm = b.amax();
    Ok((x.as_slice().to_vec(), kernel, residual, gnorm))
}

/// Hamiltonian vector field of `H` with respect to a 2-form: solves
/// `X ⌟ ω = −dH`. Constant-coefficient invertible forms are solved exactly
/// and symbolically; everything else pointwise over `samples`, which also
/// feed the consistency and structure-preservation checks.
pub fn hamiltonian_vf_2form(
    omega: &Structure2Form,
    h: &Expr,
    samples: &[Vec<f64>],
    basis: &IrrationalBasis,
) -> Result<Ham2FormResult, GeometryError> {
    let m = omega.dim();
    let grad: Vec<Expr> = (0..m).map(|b| diff_expr(h, b)).collect();

    let symbolic = omega
        .inner
        .constant_matrix()
        .and_then(|w| ratmat::inverse(&w))
        .map(|winv| {
            // X = ω^{-1} ∇H exactly.
            let comps = (0..m)
                .map(|a| {
                    let mut acc = Expr::num_int(0);
                    for (b, g) in grad.iter().enumerate() {
                        acc = fold_add(acc, fold_mul(Expr::Num(winv[a][b].clone()), g.clone()));
                    }
                    simplify(&acc)
                })
                .collect();
            VectorFieldExpr::new(comps)
        });

    let mut kernel_dim = 0usize;
    if symbolic.is_none() {
        for p in samples {
            let (_, krn, residual, gnorm) = solve_pointwise(omega, &grad, p, basis)?;
            kernel_dim = kernel_dim.max(krn);
            if residual > CONSISTENCY_TOL * gnorm.max(1.0) {
                return Err(GeometryError::InconsistentSystem {
                    point: p.clone(),
                    residual,
                });
            }
        }
    }

    let field = match symbolic {
        Some(v) => HamiltonianField::Symbolic(v),
        None => HamiltonianField::Pointwise(PointwiseHamiltonianField {
            omega: omega.clone(),
            grad: grad.clone(),
        }),
    };

    // Post-hoc structure preservation: X ⌟ dω = 0 (for closed forms L_X ω = 0
    // already follows from the solve, so only non-closed coefficients are
    // checked numerically).
    let mut hamilton3_residual = 0.0f64;
    let d = omega.d_components();
    if d.iter().any(|(_, _, _, e)| !e.is_zero()) {
        for p in samples {
            let x = field.eval(p, basis)?;
            let mut dmat = vec![0.0; m * m * m];
            for (a, b, c, e) in &d {
                let v = e.eval(p, basis)?;
                // Fill all antisymmetric positions of (a, b, c).
                for (sign, (i, j, k)) in [
                    (1.0, (*a, *b, *c)),
                    (-1.0, (*a, *c, *b)),
                    (-1.0, (*b, *a, *c)),
                    (1.0, (*b, *c, *a)),
                    (1.0, (*c, *a, *b)),
                    (-1.0, (*c, *b, *a)),
                ] {
                    dmat[(i * m + j) * m + k] = sign * v;
                }
            }
            for bq in 0..m {
                for cq in 0..m {
                    let mut s = 0.0;
                    for (aq, xa) in x.iter().enumerate() {
                        s += xa * dmat[(aq * m + bq) * m + cq];
                    }
                    hamilton3_residual = hamilton3_residual.max(s.abs());
                }
            }
        }
        if hamilton3_residual > STRUCTURE_TOL {
            let p = samples.first().cloned().unwrap_or_default();
            return Err(GeometryError::NotStructurePreserving {
                point: p,
                residual: hamilton3_residual,
            });
        }
    }

    Ok(Ham2FormResult {
        field,
        kernel_dim,
        kernel_ambiguity: kernel_dim > 0,
        hamilton3_residual,
    })
}

/// Hamiltonian vector field of a bivector: `X^a = Σ_b Π^{ab} ∂_b H`,
/// built symbolically.
pub fn hamiltonian_vf_poisson(pi: &PoissonBivector, h: &Expr) -> VectorFieldExpr {
    let m = pi.dim();
    let grad: Vec<Expr> = (0..m).map(|b| diff_expr(h, b)).collect();
    let comps = (0..m)
        .map(|a| {
            let mut acc = Expr::num_int(0);
            for (b, g) in grad.iter().enumerate() {
                let pab = pi.entry(a, b);
                if pab.is_zero() {
                    continue;
                }
                acc = fold_add(acc, fold_mul(pab, g.clone()));
            }
            simplify(&acc)
        })
        .collect();
    VectorFieldExpr::new(comps)
}

/// Bracket `{A, B} = X_A(B)` for either structure kind. The 2-form route
/// requires a constant invertible coefficient matrix so the Hamiltonian field
/// of `A` exists symbolically.
pub fn bracket(a: &Expr, b: &Expr, structure: &Structure) -> Result<Expr, GeometryError> {
    match structure {
        Structure::Poisson(pi) => {
            let xa = hamiltonian_vf_poisson(pi, a);
            Ok(xa.apply(b))
        }
        Structure::Form(w) => {
            let m = w.dim();
            let wmat = w.inner.constant_matrix().ok_or_else(|| {
                GeometryError::NotSymbolicallySolvable("coefficients are not constant".into())
            })?;
            let winv = ratmat::inverse(&wmat).ok_or_else(|| {
                GeometryError::NotSymbolicallySolvable("coefficient matrix is singular".into())
            })?;
            let comps: Vec<Expr> = (0..m)
                .map(|i| {
                    let mut acc = Expr::num_int(0);
                    for j in 0..m {
                        acc = fold_add(
                            acc,
                            fold_mul(Expr::Num(winv[i][j].clone()), diff_expr(a, j)),
                        );
                    }
                    simplify(&acc)
                })
                .collect();
            Ok(VectorFieldExpr::new(comps).apply(b))
        }
    }
}

/// Symbolic Lie derivative of a tensor field along a vector field, by the
/// Leibniz rule in coordinates:
/// `(L_X G)^I_J = X(G^I_J) − Σ_α Σ_s (∂_s X^{i_α}) G^{…s…}_J
///              + Σ_β Σ_s (∂_{j_β} X^s) G^I_{…s…}`.
pub fn lie_derivative(x: &VectorFieldExpr, g: &TensorField) -> TensorField {
    let m = g.dim();
    let h = g.contra();
    let k = g.cov();
    let jac = x.jacobian();
    let mut out = TensorField::zero(m, h, k);
    let mut idx = vec![0usize; h + k];
    loop {
        let mut acc = x.apply(g.component(&idx));
        let mut tmp = idx.clone();
        for alpha in 0..h {
            let i_alpha = idx[alpha];
            for s in 0..m {
                tmp[alpha] = s;
                let gterm = g.component(&tmp);
                if !gterm.is_zero() {
                    acc = fold_sub(acc, fold_mul(jac[i_alpha][s].clone(), gterm.clone()));
                }
            }
            tmp[alpha] = i_alpha;
        }
        for beta in 0..k {
            let slot = h + beta;
            let j_beta = idx[slot];
            for s in 0..m {
                tmp[slot] = s;
                let gterm = g.component(&tmp);
                if !gterm.is_zero() {
                    acc = fold_add(acc, fold_mul(jac[s][j_beta].clone(), gterm.clone()));
                }
            }
            tmp[slot] = j_beta;
        }
        out.set_component(&idx, simplify(&acc));
        if !advance(&mut idx, m) {
            break;
        }
    }
    out
}

/// Max Jacobiator residual
/// `Σ_d (Π^{ad} ∂_d Π^{bc} + Π^{bd} ∂_d Π^{ca} + Π^{cd} ∂_d Π^{ab})`
/// over coordinate triples and the given sample points.
pub fn check_jacobi(
    pi: &PoissonBivector,
    sample_points: &[Vec<f64>],
    basis: &IrrationalBasis,
) -> Result<f64, GeometryError> {
    let m = pi.dim();
    let mut jacobiator = Vec::new();
    for a in 0..m {
        for b in (a + 1)..m {
            for c in (b + 1)..m {
                let mut acc = Expr::num_int(0);
                for d in 0..m {
                    acc = fold_add(
                        acc,
                        fold_add(
                            fold_mul(pi.entry(a, d), diff_expr(&pi.entry(b, c), d)),
                            fold_add(
                                fold_mul(pi.entry(b, d), diff_expr(&pi.entry(c, a), d)),
                                fold_mul(pi.entry(c, d), diff_expr(&pi.entry(a, b), d)),
                            ),
                        ),
                    );
                }
                jacobiator.push(simplify(&acc));
            }
        }
    }
    let mut worst = 0.0f64;
    for p in sample_points {
        for e in &jacobiator {
            worst = worst.max(e.eval(p, basis)?.abs());
        }
    }
    Ok(worst)
}

/// Human-readable components, for reports and error messages.
pub fn describe_field(x: &VectorFieldExpr) -> String {
    x.components()
        .iter()
        .map(print_expr_generic)
        .collect::<Vec<_>>()
        .join(", ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;

    fn names(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    fn e(src: &str, vars: &[&str]) -> Expr {
        parse_expr(src, &names(vars)).unwrap()
    }

    #[test]
    fn planar_rotation_from_2form() {
        let vars = ["x", "y"];
        let w = Structure2Form::canonical_pairs(2, &[(0, 1)]).unwrap();
        let h = e("(x^2 + y^2)/2", &vars);
        let basis = IrrationalBasis::empty();
        let res = hamiltonian_vf_2form(&w, &h, &[vec![0.3, 0.7]], &basis).unwrap();
        let x = res.field.as_symbolic().unwrap();
        assert_eq!(x.components(), &[e("-y", &vars), e("x", &vars)]);
        assert!(!res.kernel_ambiguity);
    }

    #[test]
    fn degenerate_form_inconsistent_hamiltonian() {
        // ω = dx∧dy on R³, H = z: −dH is not in the image.
        let vars = ["x", "y", "z"];
        let w = Structure2Form::canonical_pairs(3, &[(0, 1)]).unwrap();
        let h = e("z", &vars);
        let basis = IrrationalBasis::empty();
        let err = hamiltonian_vf_2form(&w, &h, &[vec![0.1, 0.2, 0.3]], &basis).unwrap_err();
        assert!(matches!(err, GeometryError::InconsistentSystem { .. }));
    }

    #[test]
    fn degenerate_form_minimum_norm() {
        let vars = ["x", "y", "z"];
        let w = Structure2Form::canonical_pairs(3, &[(0, 1)]).unwrap();
        let h = e("(x^2 + y^2)/2", &vars);
        let basis = IrrationalBasis::empty();
        let res = hamiltonian_vf_2form(&w, &h, &[vec![0.5, -0.4, 1.1]], &basis).unwrap();
        assert!(res.kernel_ambiguity);
        assert_eq!(res.kernel_dim, 1);
        let v = res.field.eval(&[0.5, -0.4, 1.1], &basis).unwrap();
        assert!((v[0] - 0.4).abs() < 1e-12);
        assert!((v[1] - 0.5).abs() < 1e-12);
        assert!(v[2].abs() < 1e-12);
    }

    #[test]
    fn poisson_canonical_examples() {
        let vars = ["x", "y"];
        let pi = PoissonBivector::canonical_pair(2, 0, 1).unwrap();
        let h = e("(x^2 + y^2)/2", &vars);
        let x = hamiltonian_vf_poisson(&pi, &h);
        assert_eq!(x.components(), &[e("-y", &vars), e("x", &vars)]);

        let s = Structure::Poisson(pi);
        let b = bracket(&e("x", &vars), &e("y", &vars), &s).unwrap();
        assert_eq!(b, Expr::num_int(1));
    }

    #[test]
    fn poisson_scaled_pair_example() {
        // {x, y} = y, H = y²/2: X ∝ y² ∂x.
        let vars = ["x", "y"];
        let pi = PoissonBivector::scaled_pair(2, 0, 1, e("y", &vars)).unwrap();
        let h = e("y^2/2", &vars);
        let x = hamiltonian_vf_poisson(&pi, &h);
        assert_eq!(x.component(1), &Expr::num_int(0));
        let basis = IrrationalBasis::empty();
        let v = x.eval(&[0.0, 3.0], &basis).unwrap();
        assert!((v[0].abs() - 9.0).abs() < 1e-12, "X^1 = ±y², got {}", v[0]);
    }

    #[test]
    fn zero_bivector_gives_zero_field() {
        let pi = PoissonBivector::zero(3);
        let x = hamiltonian_vf_poisson(&pi, &e("x^2", &["x", "y", "z"]));
        assert_eq!(x, VectorFieldExpr::zero(3));
    }

    #[test]
    fn bracket_disjoint_variables_vanishes() {
        let vars = ["x1", "y1", "x2", "y2"];
        let pi = PoissonBivector::canonical_pairs(4, &[(0, 1), (2, 3)]).unwrap();
        let s = Structure::Poisson(pi);
        let b = bracket(&e("x1*y1", &vars), &e("x2*y2", &vars), &s).unwrap();
        assert_eq!(b, Expr::num_int(0));
    }

    #[test]
    fn bracket_of_function_with_itself_vanishes_numerically() {
        let vars = ["x", "y"];
        let pi = PoissonBivector::canonical_pair(2, 0, 1).unwrap();
        let s = Structure::Poisson(pi);
        let h = e("x^2*y + cos(x)", &vars);
        let b = bracket(&h, &h, &s).unwrap();
        let basis = IrrationalBasis::empty();
        for p in [[0.3, 1.4], [-2.0, 0.5]] {
            assert!(b.eval(&p, &basis).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn lie_derivative_textbook_cases() {
        let vars = ["x"];
        let x = VectorFieldExpr::new(vec![e("x", &vars)]);
        // L_{x∂x} ∂x = −∂x
        let g = TensorField::from_components(1, 1, 0, vec![Expr::num_int(1)]).unwrap();
        let l = lie_derivative(&x, &g);
        assert_eq!(l.components(), &[Expr::num_int(-1)]);
        // L_{x∂x} dx = dx
        let g = TensorField::from_one_form(1, vec![Expr::num_int(1)]).unwrap();
        let l = lie_derivative(&x, &g);
        assert_eq!(l.components(), &[Expr::num_int(1)]);
    }

    #[test]
    fn rotation_preserves_area_form() {
        let vars = ["x", "y"];
        let x = VectorFieldExpr::new(vec![e("-y", &vars), e("x", &vars)]);
        let w = Structure2Form::canonical_pairs(2, &[(0, 1)]).unwrap();
        let g = TensorField::from_two_form(&w);
        let l = lie_derivative(&x, &g);
        assert!(l.components().iter().all(|c| c.is_zero()));
    }

    #[test]
    fn jacobi_constant_and_linear_bivectors() {
        let basis = IrrationalBasis::empty();
        let pts = vec![vec![0.4, -1.2], vec![2.0, 0.3]];
        let pi = PoissonBivector::canonical_pair(2, 0, 1).unwrap();
        assert_eq!(check_jacobi(&pi, &pts, &basis).unwrap(), 0.0);
        let pi = PoissonBivector::scaled_pair(2, 0, 1, e("y", &["x", "y"])).unwrap();
        assert_eq!(check_jacobi(&pi, &pts, &basis).unwrap(), 0.0);
    }

    #[test]
    fn commutator_of_commuting_rotations() {
        let vars = ["x1", "y1", "x2", "y2"];
        let x1 = VectorFieldExpr::new(vec![
            e("-y1", &vars),
            e("x1", &vars),
            Expr::num_int(0),
            Expr::num_int(0),
        ]);
        let x2 = VectorFieldExpr::new(vec![
            Expr::num_int(0),
            Expr::num_int(0),
            e("-y2", &vars),
            e("x2", &vars),
        ]);
        let c = vf_commutator(&x1, &x2);
        assert!(c.components().iter().all(|k| k.is_zero()));
    }

    #[test]
    fn wedge_of_one_forms_antisymmetric() {
        // dx∧dy has components (0,1) -> 1, (1,0) -> −1.
        let dx = vec![Expr::num_int(1), Expr::num_int(0)];
        let dy = vec![Expr::num_int(0), Expr::num_int(1)];
        let w = TensorField::wedge_of_one_forms(2, &[dx, dy]);
        assert_eq!(w.component(&[0, 1]), &Expr::num_int(1));
        assert_eq!(w.component(&[1, 0]), &Expr::num_int(-1));
        assert_eq!(w.component(&[0, 0]), &Expr::num_int(0));
    }
}
