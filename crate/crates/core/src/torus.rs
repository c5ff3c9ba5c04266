//! Liouville torus charts for declared integrable systems.
//!
//! Given `p` commuting vector fields and `q` joint first integrals on an
//! `m = p + q`-dimensional coordinate patch, a chart is built from one seed
//! point by finding the period lattice `Γ ⊂ R^p` of the joint flow
//! `Φ_t = φ^{t_1}_{X_1} ∘ … ∘ φ^{t_p}_{X_p}` and inverting it into angle
//! coordinates `θ = t·L⁻¹ (mod 1)`, where the rows of `L` are a reduced
//! lattice basis. Everything downstream — rotation vectors, action
//! integrals, torus averaging — works through these charts.
//!
//! The search procedure: each field's flow is scanned for its first return
//! to the seed (event detection on the closest-approach function), the
//! per-field returns are combined into a lattice, candidate half-sum
//! refinements catch non-rectangular lattices, and a greedy pairwise
//! reduction shortens the basis. Returns are verified by direct integration
//! against `tol_return`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::expr::{CompiledExpr, EvalError, Expr, IrrationalBasis};
use crate::flow::{
    flow_to, integrate_with, CompiledVectorField, FlowError, FlowField, OdeOptions, StepControl,
    WeightedSum,
};
use crate::geometry::{vf_commutator, GeometryError, Structure, VectorFieldExpr};

#[derive(Debug, Error)]
pub enum TorusError {
    #[error("declared {p} fields and {q} integrals on a {m}-dimensional patch; p + q must equal m")]
    DimensionMismatch { p: usize, q: usize, m: usize },
    #[error("expected {expected} {what}, got {got}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("fields X_{i} and X_{j} do not commute: |[X_i,X_j]| = {residual:.3e} at {point:?}")]
    NotCommuting {
        i: usize,
        j: usize,
        residual: f64,
        point: Vec<f64>,
    },
    #[error("F_{j} is not a first integral of X_{i}: |X_i(F_j)| = {residual:.3e} at {point:?}")]
    NotFirstIntegral {
        i: usize,
        j: usize,
        residual: f64,
        point: Vec<f64>,
    },
    #[error("{what} rank {rank} < {expected} at the seed point; the level set through it is singular")]
    DegenerateFrame {
        what: &'static str,
        rank: usize,
        expected: usize,
    },
    #[error("no return of the X_{field} flow within horizon t = {horizon:.3e}; level set may be non-compact or its period exceeds the horizon")]
    NoReturnFound { field: usize, horizon: f64 },
    #[error("reduced lattice row {row:?} fails to return: |Φ(x0) - x0| = {residual:.3e}")]
    ReturnVerificationFailed { row: Vec<f64>, residual: f64 },
    #[error("period lattice is numerically singular")]
    SingularLattice,
    #[error("stencil chart lattice does not align with the center lattice (relation {relation:?})")]
    LatticeAlignment { relation: Vec<f64> },
    #[error("transverse directions do not move the first integrals independently")]
    TransverseDegenerate,
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Tolerances of chart construction; all CLI-overridable.
#[derive(Clone, Debug)]
pub struct Tolerances {
    /// Max allowed commutator component at validation points.
    pub tol_commute: f64,
    /// Max allowed `X_i(F_j)` at validation points.
    pub tol_firstint: f64,
    /// Max allowed `|Φ_row(x0) − x0|` for a lattice vector.
    pub tol_return: f64,
    /// Return-search horizon as a multiple of the heuristic period.
    pub horizon_periods: f64,
    pub ode: OdeOptions,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            tol_commute: 1e-8,
            tol_firstint: 1e-8,
            tol_return: 1e-7,
            horizon_periods: 50.0,
            ode: OdeOptions::default(),
        }
    }
}

// ── system declaration ──────────────────────────────────────────────────────

/// A declared integrable system of type `(p, q)`: `p` commuting fields and
/// `q` joint first integrals on an `m`-dimensional patch. The declaration is
/// *checked*, not assumed — see [`validate`].
#[derive(Clone, Debug)]
pub struct SystemSpec {
    pub dim: usize,
    pub fields: Vec<VectorFieldExpr>,
    pub integrals: Vec<Expr>,
    pub hamiltonians: Option<Vec<Expr>>,
    pub structure: Option<Structure>,
    pub basis: IrrationalBasis,
}

impl SystemSpec {
    pub fn new(
        dim: usize,
        fields: Vec<VectorFieldExpr>,
        integrals: Vec<Expr>,
        basis: IrrationalBasis,
    ) -> Result<Self, TorusError> {
        let (p, q) = (fields.len(), integrals.len());
        if p == 0 || p + q != dim {
            return Err(TorusError::DimensionMismatch { p, q, m: dim });
        }
        if let Some(f) = fields.iter().find(|f| f.dim() != dim) {
            return Err(TorusError::CountMismatch {
                what: "field components",
                expected: dim,
                got: f.dim(),
            });
        }
        Ok(SystemSpec {
            dim,
            fields,
            integrals,
            hamiltonians: None,
            structure: None,
            basis,
        })
    }

    pub fn with_hamiltonians(mut self, h: Vec<Expr>) -> Result<Self, TorusError> {
        if h.len() != self.fields.len() {
            return Err(TorusError::CountMismatch {
                what: "Hamiltonians",
                expected: self.fields.len(),
                got: h.len(),
            });
        }
        self.hamiltonians = Some(h);
        Ok(self)
    }

    pub fn with_structure(mut self, s: Structure) -> Self {
        self.structure = Some(s);
        self
    }

    pub fn p(&self) -> usize {
        self.fields.len()
    }

    pub fn q(&self) -> usize {
        self.integrals.len()
    }

    pub fn compile(&self) -> Result<Arc<CompiledSystem>, TorusError> {
        let fields = self
            .fields
            .iter()
            .map(|f| CompiledVectorField::new(f, &self.basis))
            .collect::<Result<Vec<_>, _>>()?;
        let integrals = self
            .integrals
            .iter()
            .map(|e| e.compile(&self.basis))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Arc::new(CompiledSystem {
            dim: self.dim,
            fields,
            integrals,
            spec: self.clone(),
        }))
    }
}

/// Compiled form of a [`SystemSpec`]: everything chart construction
/// evaluates in inner loops. Immutable and shareable across threads.
#[derive(Debug)]
pub struct CompiledSystem {
    pub dim: usize,
    pub fields: Vec<CompiledVectorField>,
    pub integrals: Vec<CompiledExpr>,
    spec: SystemSpec,
}

impl CompiledSystem {
    pub fn p(&self) -> usize {
        self.fields.len()
    }

    pub fn q(&self) -> usize {
        self.integrals.len()
    }

    pub fn spec(&self) -> &SystemSpec {
        &self.spec
    }

    pub fn eval_integrals(&self, x: &[f64]) -> Vec<f64> {
        self.integrals.iter().map(|f| f.eval(x)).collect()
    }

    /// Joint flow `Φ_t(x0)` along `Σ_i t_i X_i` (valid because the fields
    /// commute; see the order-independence property test).
    pub fn joint_flow(
        &self,
        x0: &[f64],
        t: &[f64],
        ode: &OdeOptions,
    ) -> Result<Vec<f64>, FlowError> {
        if t.iter().all(|&v| v == 0.0) {
            return Ok(x0.to_vec());
        }
        let sum = WeightedSum::new(&self.fields, t.to_vec());
        flow_to(&sum, x0, 1.0, ode)
    }

    /// Same joint flow composed field by field in the given order; used by
    /// the order-independence check.
    pub fn sequential_flow(
        &self,
        x0: &[f64],
        t: &[f64],
        order: &[usize],
        ode: &OdeOptions,
    ) -> Result<Vec<f64>, FlowError> {
        let mut x = x0.to_vec();
        for &i in order {
            if t[i] != 0.0 {
                x = flow_to(&self.fields[i], &x, t[i], ode)?;
            }
        }
        Ok(x)
    }
}

// ── declaration checks ──────────────────────────────────────────────────────

/// Residuals of the integrability conditions measured at sample points.
#[derive(Clone, Debug)]
pub struct ValidationReport {
    pub max_commutator: f64,
    pub max_first_integral_residual: f64,
    pub frame_rank: usize,
    pub differential_rank: usize,
}

/// Checks the declared structure at the seed and at a handful of points
/// along each flow: pairwise commutators, `X_i(F_j)`, and the two
/// nondegeneracy ranks at the seed.
pub fn validate(
    spec: &SystemSpec,
    sys: &CompiledSystem,
    x0: &[f64],
    tols: &Tolerances,
) -> Result<ValidationReport, TorusError> {
    let m = spec.dim;
    let p = spec.p();

    let mut points = vec![x0.to_vec()];
    for f in &sys.fields {
        let scale = heuristic_period(f, x0).unwrap_or(1.0);
        for frac in [0.13, 0.29] {
            points.push(flow_to(f, x0, frac * scale, &tols.ode)?);
        }
    }

    // Pairwise commutators, symbolically differentiated, numerically sampled.
    let mut max_comm = 0.0f64;
    for i in 0..p {
        for j in (i + 1)..p {
            let c = vf_commutator(&spec.fields[i], &spec.fields[j]);
            for pt in &points {
                let v = c.eval(pt, &spec.basis)?;
                let r = v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
                if r > tols.tol_commute {
                    return Err(TorusError::NotCommuting {
                        i,
                        j,
                        residual: r,
                        point: pt.clone(),
                    });
                }
                max_comm = max_comm.max(r);
            }
        }
    }

    let mut max_fint = 0.0f64;
    for (i, f) in spec.fields.iter().enumerate() {
        for (j, g) in spec.integrals.iter().enumerate() {
            let lie = f.apply(g);
            for pt in &points {
                let r = lie.eval(pt, &spec.basis)?.abs();
                if r > tols.tol_firstint {
                    return Err(TorusError::NotFirstIntegral {
                        i,
                        j,
                        residual: r,
                        point: pt.clone(),
                    });
                }
                max_fint = max_fint.max(r);
            }
        }
    }

    // Nondegeneracy at the seed: the fields span a p-frame, the integral
    // differentials a q-coframe.
    let mut fmat = DMatrix::zeros(m, p);
    for (i, f) in spec.fields.iter().enumerate() {
        let v = f.eval(x0, &spec.basis)?;
        for a in 0..m {
            fmat[(a, i)] = v[a];
        }
    }
    let frame_rank = svd_rank(&fmat);
    if frame_rank < p {
        return Err(TorusError::DegenerateFrame {
            what: "field frame",
            rank: frame_rank,
            expected: p,
        });
    }
    let q = spec.q();
    let mut gmat = DMatrix::zeros(m, q);
    for (j, g) in spec.integrals.iter().enumerate() {
        for a in 0..m {
            gmat[(a, j)] = crate::expr::diff_expr(g, a).eval(x0, &spec.basis)?;
        }
    }
    let differential_rank = if q == 0 { 0 } else { svd_rank(&gmat) };
    if differential_rank < q {
        return Err(TorusError::DegenerateFrame {
            what: "integral differentials",
            rank: differential_rank,
            expected: q,
        });
    }

    Ok(ValidationReport {
        max_commutator: max_comm,
        max_first_integral_residual: max_fint,
        frame_rank,
        differential_rank,
    })
}

fn svd_rank(m: &DMatrix<f64>) -> usize {
    let svd = m.clone().svd(false, false);
    let max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    svd.singular_values
        .iter()
        .filter(|&&s| s > 1e-12 * max)
        .count()
}

// ── first returns and the period lattice ────────────────────────────────────

/// `2π·max(1, |x0|) / |X(x0)|`: the period the orbit would have if it were a
/// circle of the ambient scale. Only used to size horizons and step caps.
fn heuristic_period<F: FlowField + ?Sized>(field: &F, x0: &[f64]) -> Option<f64> {
    let mut v = vec![0.0; x0.len()];
    field.eval_into(x0, &mut v);
    let speed = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = x0.iter().map(|a| a * a).sum::<f64>().sqrt().max(1.0);
    if speed < 1e-12 * scale {
        return None;
    }
    Some(std::f64::consts::TAU * scale / speed)
}

/// First time `t > 0` at which the flow of one field returns to `x0` within
/// `tol_return`. Event detection: the half-squared-distance derivative
/// `g(t) = (x(t) − x0)·X(x(t))` crosses `−` to `+` at closest approaches;
/// bracketed crossings are bisected on the dense interpolant and every
/// candidate is confirmed by direct integration before acceptance.
fn first_return(
    field: &CompiledVectorField,
    x0: &[f64],
    tols: &Tolerances,
    field_index: usize,
) -> Result<f64, TorusError> {
    let m = x0.len();
    let t_heur = heuristic_period(field, x0).ok_or(TorusError::NoReturnFound {
        field: field_index,
        horizon: 0.0,
    })?;
    let horizon = tols.horizon_periods * t_heur;
    let mut opts = tols.ode.clone();
    opts.h_max = Some(t_heur / 4.0);

    // The orbit must leave this ball before a close approach counts as a
    // return; otherwise t = 0 itself would qualify.
    let escape_r = 100.0 * tols.tol_return;
    let mut escaped = false;

    let mut candidates: Vec<f64> = Vec::new();
    const INTERIOR: usize = 8;
    let mut xk = vec![0.0; m];
    let mut vk = vec![0.0; m];
    let mut prev: Option<(f64, f64)> = None; // (t, g)

    integrate_with(field, x0, 0.0, horizon, &opts, |dense, _| {
        let mut bracket: Option<(f64, f64)> = None;
        for k in 0..=INTERIOR {
            let t = dense.t0 + dense.h * (k as f64) / (INTERIOR as f64);
            dense.eval_into(t, &mut xk);
            field.eval_into(&xk, &mut vk);
            let mut g = 0.0;
            let mut d2 = 0.0;
            for a in 0..m {
                let dx = xk[a] - x0[a];
                g += dx * vk[a];
                d2 += dx * dx;
            }
            if !escaped && d2.sqrt() > escape_r {
                escaped = true;
            }
            if let Some((tp, gp)) = prev {
                if escaped && gp < 0.0 && g >= 0.0 && tp >= dense.t0 {
                    bracket = Some((tp, t));
                }
            }
            if let Some((ta, tb)) = bracket.take() {
                // Bisect g on the dense interpolant.
                let (mut lo, mut hi) = (ta, tb);
                for _ in 0..64 {
                    let mid = 0.5 * (lo + hi);
                    dense.eval_into(mid, &mut xk);
                    field.eval_into(&xk, &mut vk);
                    let gm: f64 = (0..m).map(|a| (xk[a] - x0[a]) * vk[a]).sum();
                    if gm < 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let tc = 0.5 * (lo + hi);
                dense.eval_into(tc, &mut xk);
                let d: f64 = (0..m)
                    .map(|a| (xk[a] - x0[a]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if d <= tols.tol_return {
                    candidates.push(tc);
                }
            }
            prev = Some((t, g));
        }
        if candidates.is_empty() {
            StepControl::Continue
        } else {
            StepControl::Stop
        }
    })?;

    for &tc in &candidates {
        let xe = flow_to(field, x0, tc, &tols.ode)?;
        let d: f64 = xe
            .iter()
            .zip(x0)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        if d <= tols.tol_return {
            return Ok(tc);
        }
    }
    Err(TorusError::NoReturnFound {
        field: field_index,
        horizon,
    })
}

/// Distance of the joint flow by lattice vector `row` back to the seed.
fn return_residual(
    sys: &CompiledSystem,
    x0: &[f64],
    row: &[f64],
    ode: &OdeOptions,
) -> Result<f64, FlowError> {
    let xe = sys.joint_flow(x0, row, ode)?;
    Ok(xe
        .iter()
        .zip(x0)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Greedy pairwise size reduction of the lattice rows (Lagrange/Gauss style
/// generalized); adequate for the `p ≤ 4` scale this library targets.
fn reduce_rows(rows: &mut [DVector<f64>]) {
    let p = rows.len();
    loop {
        let mut improved = false;
        for i in 0..p {
            for j in 0..p {
                if i == j {
                    continue;
                }
                let denom = rows[j].dot(&rows[j]);
                if denom == 0.0 {
                    continue;
                }
                let k = (rows[i].dot(&rows[j]) / denom).round();
                if k != 0.0 {
                    let cand = &rows[i] - &rows[j] * k;
                    if cand.norm() < rows[i].norm() * (1.0 - 1e-12) {
                        rows[i] = cand;
                        improved = true;
                    }
                }
            }
        }
        if !improved {
            break;
        }
    }
    // Deterministic presentation: shortest first, then sign-normalized so
    // the first significant component is positive.
    rows.sort_by(|a, b| {
        a.norm()
            .partial_cmp(&b.norm())
            .unwrap()
            .then_with(|| a.iter().partial_cmp(b.iter()).unwrap())
    });
    for r in rows.iter_mut() {
        let scale = r.norm();
        if let Some(lead) = r.iter().find(|c| c.abs() > 1e-9 * scale) {
            if *lead < 0.0 {
                *r = -r.clone();
            }
        }
    }
}

/// Period lattice of the joint flow through `x0`: rows of the returned
/// matrix generate `Γ = {t : Φ_t(x0) = x0}`.
///
/// Per-field first returns give a full-rank sublattice; half-sum candidates
/// (`½ Σ_{i∈S} row_i` for row subsets `S`) are then tested to catch
/// non-rectangular lattices, and the basis is size-reduced. Every returned
/// row is verified by direct integration.
pub fn find_period_lattice(
    sys: &CompiledSystem,
    x0: &[f64],
    tols: &Tolerances,
) -> Result<DMatrix<f64>, TorusError> {
    let p = sys.p();
    let mut rows: Vec<DVector<f64>> = Vec::with_capacity(p);
    for i in 0..p {
        let t = first_return(&sys.fields[i], x0, tols, i)?;
        let mut r = DVector::zeros(p);
        r[i] = t;
        rows.push(r);
    }

    if p > 1 {
        // Index-2 refinements: a strictly finer lattice must contain a
        // half-integer combination of the current basis.
        for _round in 0..3 {
            let mut refined = false;
            for mask in 1u32..(1 << p) {
                if mask.count_ones() < 2 {
                    continue;
                }
                let mut u = DVector::zeros(p);
                for (i, row) in rows.iter().enumerate() {
                    if mask & (1 << i) != 0 {
                        u += row * 0.5;
                    }
                }
                let res = return_residual(sys, x0, u.as_slice(), &tols.ode)?;
                if res <= tols.tol_return {
                    let j = (0..p).find(|i| mask & (1 << i) != 0).unwrap();
                    rows[j] = u;
                    refined = true;
                    break;
                }
            }
            if !refined {
                break;
            }
            reduce_rows(&mut rows);
        }
    }

    reduce_rows(&mut rows);

    let lattice = DMatrix::from_fn(p, p, |i, j| rows[i][j]);
    if lattice.determinant().abs() < 1e-12 {
        return Err(TorusError::SingularLattice);
    }
    for row in rows.iter() {
        let res = return_residual(sys, x0, row.as_slice(), &tols.ode)?;
        if res > tols.tol_return {
            return Err(TorusError::ReturnVerificationFailed {
                row: row.iter().copied().collect(),
                residual: res,
            });
        }
    }
    Ok(lattice)
}

// ── charts ──────────────────────────────────────────────────────────────────

/// One Liouville torus chart: seed, period lattice, and the derived angle
/// and frequency data. Immutable once built; safe to share across threads.
#[derive(Clone, Debug)]
pub struct TorusChart {
    system: Arc<CompiledSystem>,
    pub seed: Vec<f64>,
    /// Rows generate the period lattice in joint flow-time coordinates.
    pub lattice: DMatrix<f64>,
    /// `L⁻¹`; row `i` is the rotation vector of `X_i` per unit time in the
    /// period-1 angle frame.
    pub lattice_inv: DMatrix<f64>,
    /// `F_j(seed)` — the invariant levels labeling this torus.
    pub levels: Vec<f64>,
    /// Flow composition order on record (the joint flow is order-independent
    /// for commuting fields; the order is part of the chart's definition).
    pub flow_order: Vec<usize>,
    pub ode: OdeOptions,
    pub validation: ValidationReport,
}

/// Builds the chart through `x0`: validates the declaration, finds the
/// period lattice, and anchors angles at `θ(x0) = 0`.
pub fn build_chart(
    sys: &Arc<CompiledSystem>,
    x0: &[f64],
    tols: &Tolerances,
) -> Result<TorusChart, TorusError> {
    let validation = validate(sys.spec(), sys, x0, tols)?;
    let lattice = find_period_lattice(sys, x0, tols)?;
    let lattice_inv = lattice
        .clone()
        .try_inverse()
        .ok_or(TorusError::SingularLattice)?;
    let levels = sys.eval_integrals(x0);
    Ok(TorusChart {
        system: sys.clone(),
        seed: x0.to_vec(),
        lattice,
        lattice_inv,
        levels,
        flow_order: (0..sys.p()).collect(),
        ode: tols.ode.clone(),
        validation,
    })
}

impl TorusChart {
    pub fn p(&self) -> usize {
        self.system.p()
    }

    pub fn dim(&self) -> usize {
        self.system.dim
    }

    pub fn system(&self) -> &Arc<CompiledSystem> {
        &self.system
    }

    /// Rotation vector (per unit time, period-1 frame) of `Σ_i w_i X_i`.
    pub fn rotation_vector(&self, weights: &[f64]) -> Vec<f64> {
        let p = self.p();
        (0..p)
            .map(|j| (0..p).map(|i| weights[i] * self.lattice_inv[(i, j)]).sum())
            .collect()
    }

    /// Joint flow times reaching angle `θ` from the seed: `t = θ·L`.
    pub fn flow_times(&self, theta: &[f64]) -> Vec<f64> {
        let p = self.p();
        (0..p)
            .map(|j| (0..p).map(|i| theta[i] * self.lattice[(i, j)]).sum())
            .collect()
    }

    /// The torus point at angle `θ` (fresh integration from the seed, so
    /// errors do not accumulate across grid sweeps).
    pub fn point_at(&self, theta: &[f64]) -> Result<Vec<f64>, FlowError> {
        let t = self.flow_times(theta);
        self.system.joint_flow(&self.seed, &t, &self.ode)
    }

    /// Columns are the angle frame `E_{θ_i}(x) = Σ_j L_{ij} X_j(x)`.
    pub fn angle_frame(&self, x: &[f64]) -> DMatrix<f64> {
        let (m, p) = (self.dim(), self.p());
        let mut vals = vec![vec![0.0; m]; p];
        for (j, f) in self.system.fields.iter().enumerate() {
            f.eval_into(x, &mut vals[j]);
        }
        DMatrix::from_fn(m, p, |a, i| {
            (0..p).map(|j| self.lattice[(i, j)] * vals[j][a]).sum()
        })
    }

    /// Uniform row-major grid over `[0,1)^p`, `n` points per angle.
    pub fn theta_grid(p: usize, n: usize) -> Vec<Vec<f64>> {
        let total = n.pow(p as u32);
        let mut out = Vec::with_capacity(total);
        for flat in 0..total {
            let mut idx = flat;
            let mut theta = vec![0.0; p];
            for k in (0..p).rev() {
                theta[k] = (idx % n) as f64 / n as f64;
                idx /= n;
            }
            out.push(theta);
        }
        out
    }

    /// `(θ, x(θ))` over the uniform grid.
    pub fn sample_grid(&self, n: usize) -> Result<Vec<(Vec<f64>, Vec<f64>)>, FlowError> {
        Self::theta_grid(self.p(), n)
            .into_iter()
            .map(|theta| {
                let x = self.point_at(&theta)?;
                Ok((theta, x))
            })
            .collect()
    }
}

/// Result of pushing a field into a chart's angle frame over sampled torus
/// points.
#[derive(Clone, Debug)]
pub struct QuasiPeriodicityReport {
    /// Mean angle-frame components (the measured rotation vector).
    pub mean_components: Vec<f64>,
    /// Max over samples of component spread plus frame-fit misfit; a
    /// quasi-periodic field tangent to the torus scores ≈ 0.
    pub residual: f64,
}

/// Checks that `field` is constant in the chart's angle frame: at each
/// sampled torus point the field is least-squares fitted to the frame
/// columns, and the report combines the fit misfit with the spread of the
/// fitted components across samples.
pub fn verify_quasiperiodicity(
    chart: &TorusChart,
    field: &VectorFieldExpr,
    n_samples: usize,
) -> Result<QuasiPeriodicityReport, TorusError> {
    let sys = chart.system();
    let compiled = CompiledVectorField::new(field, &sys.spec().basis)?;
    let p = chart.p();
    let m = chart.dim();
    let per_axis = (n_samples as f64).powf(1.0 / p as f64).round().max(2.0) as usize;

    let mut comps: Vec<Vec<f64>> = Vec::new();
    let mut max_misfit = 0.0f64;
    let mut v = vec![0.0; m];
    for theta in TorusChart::theta_grid(p, per_axis) {
        let x = chart.point_at(&theta)?;
        let frame = chart.angle_frame(&x);
        compiled.eval_into(&x, &mut v);
        let b = DVector::from_column_slice(&v);
        let svd = frame.clone().svd(true, true);
        let sol = svd
            .solve(&b, 1e-13)
            .map_err(|e| TorusError::Geometry(GeometryError::NotSymbolicallySolvable(e.into())))?;
        let misfit = (&frame * &sol - &b).amax();
        max_misfit = max_misfit.max(misfit);
        comps.push(sol.iter().copied().collect());
    }

    let n = comps.len() as f64;
    let mean: Vec<f64> = (0..p)
        .map(|j| comps.iter().map(|c| c[j]).sum::<f64>() / n)
        .collect();
    let mut spread = 0.0f64;
    for c in &comps {
        for j in 0..p {
            spread = spread.max((c[j] - mean[j]).abs());
        }
    }
    Ok(QuasiPeriodicityReport {
        mean_components: mean,
        residual: spread + max_misfit,
    })
}

/// `U = round(L_a·L_b⁻¹)` when that rounding is a unimodular integer matrix
/// relating the two lattices within `tol`; `None` otherwise.
pub fn unimodular_relation(
    l_a: &DMatrix<f64>,
    l_b: &DMatrix<f64>,
    tol: f64,
) -> Option<DMatrix<f64>> {
    let rel = l_a * l_b.clone().try_inverse()?;
    let u = rel.map(|v| v.round());
    if (&rel - &u).amax() > tol {
        return None;
    }
    if (u.determinant().abs() - 1.0).abs() > tol {
        return None;
    }
    Some(u)
}

// ── chart families ──────────────────────────────────────────────────────────

/// A chart at the center torus plus centered-difference stencil charts in
/// each transverse direction, with all stencil lattices aligned to the
/// center basis (same homology classes). This is what transverse
/// derivatives — of the lattice, of actions, of anything leafwise — are
/// computed from.
#[derive(Clone, Debug)]
pub struct ChartFamily {
    pub center: TorusChart,
    /// Unit seed displacement per stencil direction.
    pub directions: Vec<Vec<f64>>,
    /// Seed displacement step.
    pub step: f64,
    pub minus: Vec<TorusChart>,
    pub plus: Vec<TorusChart>,
    /// `∂z_j/∂s_k`: row `k` = invariant-level velocities along direction `k`.
    pub dz_ds: DMatrix<f64>,
    /// `∂s_k/∂z_j` (inverse of the above).
    pub ds_dz: DMatrix<f64>,
    /// `∂L/∂z_j` for each invariant level `z_j`, in the center basis.
    pub dlattice_dz: Vec<DMatrix<f64>>,
}

/// Builds stencil charts at `x0 ± step·dir` for each direction, aligns
/// their lattices to the center chart, and forms the lattice derivatives
/// with respect to the invariant levels.
pub fn build_chart_family(
    sys: &Arc<CompiledSystem>,
    x0: &[f64],
    directions: &[Vec<f64>],
    step: f64,
    tols: &Tolerances,
) -> Result<ChartFamily, TorusError> {
    let center = build_chart(sys, x0, tols)?;
    let q = sys.q();
    assert_eq!(
        directions.len(),
        q,
        "one stencil direction per first integral"
    );
    let mut minus = Vec::with_capacity(q);
    let mut plus = Vec::with_capacity(q);
    for dir in directions {
        for (sign, out) in [(-1.0, &mut minus), (1.0, &mut plus)] {
            let seed: Vec<f64> = x0
                .iter()
                .zip(dir)
                .map(|(a, d)| a + sign * step * d)
                .collect();
            let mut chart = build_chart(sys, &seed, tols)?;
            align_to(&mut chart, &center)?;
            out.push(chart);
        }
    }

    // ∂z/∂s by centered differences of the invariant levels.
    let dz_ds = DMatrix::from_fn(q, q, |k, j| {
        (plus[k].levels[j] - minus[k].levels[j]) / (2.0 * step)
    });
    let ds_dz = dz_ds
        .clone()
        .try_inverse()
        .ok_or(TorusError::TransverseDegenerate)?;

    // ∂L/∂s_k, then chain through ∂s/∂z.
    let p = sys.p();
    let dl_ds: Vec<DMatrix<f64>> = (0..q)
        .map(|k| (&plus[k].lattice - &minus[k].lattice) / (2.0 * step))
        .collect();
    let dlattice_dz: Vec<DMatrix<f64>> = (0..q)
        .map(|j| {
            let mut acc = DMatrix::zeros(p, p);
            for (k, dk) in dl_ds.iter().enumerate() {
                acc += dk * ds_dz[(k, j)];
            }
            acc
        })
        .collect();

    Ok(ChartFamily {
        center,
        directions: directions.to_vec(),
        step,
        minus,
        plus,
        dz_ds,
        ds_dz,
        dlattice_dz,
    })
}

/// Rewrites `chart`'s lattice basis in the homology classes of `reference`
/// via the unimodular relation between them.
fn align_to(chart: &mut TorusChart, reference: &TorusChart) -> Result<(), TorusError> {
    let u = unimodular_relation(&reference.lattice, &chart.lattice, 0.2).ok_or_else(|| {
        TorusError::LatticeAlignment {
            relation: (reference.lattice.clone() * chart.lattice.clone().try_inverse().unwrap())
                .iter()
                .copied()
                .collect(),
        }
    })?;
    chart.lattice = &u * &chart.lattice;
    chart.lattice_inv = chart
        .lattice
        .clone()
        .try_inverse()
        .ok_or(TorusError::SingularLattice)?;
    Ok(())
}

impl ChartFamily {
    /// Seed displacement per unit change of invariant level `z_j`.
    pub fn seed_velocity(&self, j: usize) -> Vec<f64> {
        let m = self.center.dim();
        let q = self.directions.len();
        (0..m)
            .map(|a| {
                (0..q)
                    .map(|k| self.ds_dz[(k, j)] * self.directions[k][a])
                    .sum()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;

    const TAU: f64 = std::f64::consts::TAU;

    fn names(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    /// Two uncoupled oscillators with frequencies (1, √2).
    fn oscillator_pair() -> SystemSpec {
        let vars = names(&["x1", "y1", "x2", "y2"]);
        let mut basis = IrrationalBasis::default();
        basis.declare("sqrt2", "1.4142135623730951").unwrap();
        let f = |src: &str| {
            crate::expr::parse_expr_with(src, &vars, &["sqrt2".into()]).unwrap()
        };
        let x1 = VectorFieldExpr::new(vec![
            f("-y1"),
            f("x1"),
            f("0"),
            f("0"),
        ]);
        let x2 = VectorFieldExpr::new(vec![
            f("0"),
            f("0"),
            f("-sqrt2*y2"),
            f("sqrt2*x2"),
        ]);
        SystemSpec::new(
            4,
            vec![x1, x2],
            vec![f("(x1^2 + y1^2)/2"), f("sqrt2*(x2^2 + y2^2)/2")],
            basis,
        )
        .unwrap()
    }

    fn single_oscillator() -> SystemSpec {
        let vars = names(&["x", "y"]);
        let x = VectorFieldExpr::new(vec![
            parse_expr("-y", &vars).unwrap(),
            parse_expr("x", &vars).unwrap(),
        ]);
        SystemSpec::new(
            2,
            vec![x],
            vec![parse_expr("(x^2 + y^2)/2", &vars).unwrap()],
            IrrationalBasis::empty(),
        )
        .unwrap()
    }

    #[test]
    fn single_oscillator_lattice_is_full_period() {
        let sys = single_oscillator().compile().unwrap();
        let l = find_period_lattice(&sys, &[1.0, 0.0], &Tolerances::default()).unwrap();
        assert!((l[(0, 0)] - TAU).abs() < 1e-6);
    }

    #[test]
    fn oscillator_pair_lattice_diagonal() {
        let sys = oscillator_pair().compile().unwrap();
        let l = find_period_lattice(&sys, &[1.0, 0.0, 0.8, 0.0], &Tolerances::default()).unwrap();
        let expect = [TAU, TAU / 2.0f64.sqrt()];
        // Reduction sorts rows by length, so the √2-oscillator period leads.
        assert!((l[(0, 1)] - expect[1]).abs() < 1e-6, "{l}");
        assert!((l[(1, 0)] - expect[0]).abs() < 1e-6, "{l}");
        assert!(l[(0, 0)].abs() < 1e-6 && l[(1, 1)].abs() < 1e-6, "{l}");
    }

    #[test]
    fn chart_anchors_angles_at_seed() {
        let sys = oscillator_pair().compile().unwrap();
        let x0 = [1.0, 0.0, 0.8, 0.0];
        let chart = build_chart(&sys, &x0, &Tolerances::default()).unwrap();
        let x = chart.point_at(&vec![0.0, 0.0]).unwrap();
        for (a, b) in x.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-12);
        }
        // Angle 1 along each lattice row returns to the seed.
        for theta in [[1.0, 0.0], [0.0, 1.0]] {
            let x = chart.point_at(&theta).unwrap();
            for (a, b) in x.iter().zip(&x0) {
                assert!((a - b).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn combined_field_rotation_vector() {
        let sys = oscillator_pair().compile().unwrap();
        let chart = build_chart(&sys, &[1.0, 0.0, 0.8, 0.0], &Tolerances::default()).unwrap();
        let mut rot = chart.rotation_vector(&[1.0, 1.0]);
        rot.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut expect = [1.0 / TAU, 2.0f64.sqrt() / TAU];
        expect.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (r, e) in rot.iter().zip(&expect) {
            assert!((r - e).abs() < 1e-7, "rotation {rot:?} vs {expect:?}");
        }
    }

    #[test]
    fn first_integrals_constant_on_torus() {
        let sys = oscillator_pair().compile().unwrap();
        let chart = build_chart(&sys, &[1.0, 0.0, 0.8, 0.0], &Tolerances::default()).unwrap();
        let levels = chart.levels.clone();
        for (_, x) in chart.sample_grid(6).unwrap() {
            let f = sys.eval_integrals(&x);
            for (a, b) in f.iter().zip(&levels) {
                assert!((a - b).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn flow_order_independence() {
        let sys = oscillator_pair().compile().unwrap();
        let x0 = [1.0, 0.0, 0.8, 0.0];
        let t = [1.3, 2.1];
        let ode = OdeOptions::default();
        let a = sys.sequential_flow(&x0, &t, &[0, 1], &ode).unwrap();
        let b = sys.sequential_flow(&x0, &t, &[1, 0], &ode).unwrap();
        let c = sys.joint_flow(&x0, &t, &ode).unwrap();
        for i in 0..4 {
            assert!((a[i] - b[i]).abs() < 1e-8);
            assert!((a[i] - c[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn quasiperiodicity_accepts_member_field_rejects_perturbed() {
        let sys = oscillator_pair().compile().unwrap();
        let spec = oscillator_pair();
        let chart = build_chart(&sys, &[1.0, 0.0, 0.8, 0.0], &Tolerances::default()).unwrap();

        let good = verify_quasiperiodicity(&chart, &spec.fields[0], 64).unwrap();
        assert!(good.residual <= 1e-6, "residual {}", good.residual);

        // X_2 + 0.1·x1·∂x1 is not tangent-constant on the torus.
        let vars = names(&["x1", "y1", "x2", "y2"]);
        let mut comps = spec.fields[1].components().to_vec();
        comps[0] = parse_expr("0.1*x1", &vars).unwrap();
        let bad = VectorFieldExpr::new(comps);
        let report = verify_quasiperiodicity(&chart, &bad, 64).unwrap();
        assert!(report.residual > 1e-3, "residual {}", report.residual);
    }

    #[test]
    fn rejects_non_commuting_declaration() {
        let vars = names(&["x1", "y1", "x2", "y2"]);
        let f = |src: &str| parse_expr(src, &vars).unwrap();
        let x1 = VectorFieldExpr::new(vec![f("-y1"), f("x1"), f("0"), f("0")]);
        // Depends on x1, so it fails to commute with the rotation.
        let x2 = VectorFieldExpr::new(vec![f("0"), f("0"), f("-y2*x1"), f("x2*x1")]);
        let spec = SystemSpec::new(
            4,
            vec![x1, x2],
            vec![f("(x1^2 + y1^2)/2"), f("(x2^2 + y2^2)/2")],
            IrrationalBasis::empty(),
        )
        .unwrap();
        let sys = spec.compile().unwrap();
        let err = build_chart(&sys, &[1.0, 0.0, 0.8, 0.0], &Tolerances::default()).unwrap_err();
        assert!(matches!(err, TorusError::NotCommuting { .. }), "{err}");
    }

    #[test]
    fn rejects_singular_seed() {
        let sys = single_oscillator().compile().unwrap();
        let err = build_chart(&sys, &[0.0, 0.0], &Tolerances::default()).unwrap_err();
        assert!(matches!(err, TorusError::DegenerateFrame { .. }), "{err}");
    }

    #[test]
    fn unimodular_relation_detects_and_rejects() {
        let l1 = DMatrix::from_row_slice(2, 2, &[TAU, 0.0, 0.0, 3.0]);
        // Same lattice, different basis: rows [1,1]·L, [0,1]·L.
        let l2 = DMatrix::from_row_slice(2, 2, &[TAU, 3.0, 0.0, 3.0]);
        let u = unimodular_relation(&l2, &l1, 1e-9).unwrap();
        assert_eq!(u.map(|v| v as i64), DMatrix::from_row_slice(2, 2, &[1, 1, 0, 1]).map(|v| v as i64));
        // Unrelated lattice.
        let l3 = DMatrix::from_row_slice(2, 2, &[1.7, 0.0, 0.0, 3.0]);
        assert!(unimodular_relation(&l3, &l1, 1e-9).is_none());
    }

    #[test]
    fn chart_family_lattice_derivative_oscillator() {
        // L(E) for one oscillator is constant 2π, so ∂L/∂z = 0.
        let sys = single_oscillator().compile().unwrap();
        let fam = build_chart_family(
            &sys,
            &[1.0, 0.0],
            &[vec![1.0, 0.0]],
            0.05,
            &Tolerances::default(),
        )
        .unwrap();
        assert!(fam.dlattice_dz[0].amax() < 1e-5, "{}", fam.dlattice_dz[0]);
        // Moving the seed by dx changes E = (x²+y²)/2 by x·dx = 1·dx.
        assert!((fam.dz_ds[(0, 0)] - 1.0).abs() < 1e-8);
    }
}
