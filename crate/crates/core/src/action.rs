//! Action variables on Liouville torus charts.
//!
//! Two independent routes to the same numbers: the contour integral
//! `μ = ∮_γ α` of a primitive `α` of the symplectic form over a lattice
//! cycle, and the leafwise path integral of `ρ = Σ_i c_i dH_i` across the
//! torus family, where `c(z)` is the period-lattice row of the cycle class.
//! On symplectic inputs the two agree up to the path-integral's anchoring
//! constant, and `verify_action` checks the Hamiltonian-action identity
//! `Z_i ⌟ ω = −dμ_i` directly. `assemble_normal_form` then expresses the
//! declared structure in the chart frame and measures how close it is to
//! the canonical action-angle block form.
//!
//! Transverse derivatives (of actions, of the lattice) always come from
//! centered differences over a [`ChartFamily`] stencil; in-leaf data is
//! exact flow evaluation.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::expr::{diff_expr, CompiledExpr, EvalError, Expr};
use crate::flow::{
    flow_sequence, flow_to, CompiledVectorField, FlowError, FlowField, VariationalField,
    WeightedSum,
};

type JointVariational<'a> = VariationalField<'a, WeightedSum<'a, CompiledVectorField>>;
use crate::geometry::{GeometryError, Structure, Structure2Form};
use crate::torus::{
    find_period_lattice, unimodular_relation, ChartFamily, CompiledSystem, Tolerances, TorusChart,
    TorusError,
};

#[derive(Debug, Error)]
pub enum ActionError {
    #[error("dα ≠ ω: residual {residual:.3e} at {point:?} exceeds 1e-9")]
    PrimitiveMismatch { residual: f64, point: Vec<f64> },
    #[error("homotopic paths disagree: direct {direct:.9e} vs detour {detour:.9e}")]
    PathInconsistency { direct: f64, detour: f64 },
    #[error("mode mismatch: {0}")]
    ModeMismatch(String),
    #[error("action-map rank varies across the family: window ranks {ranks:?}")]
    RankUnstable { ranks: Vec<usize> },
    #[error("{p} commuting fields exceed the bound m − rank(ω)/2 = {bound}")]
    DimensionBound { p: usize, bound: usize },
    #[error("stencil chart lattice does not align with the reference basis")]
    FamilyAlignment,
    #[error("expected {expected} {what}, got {got}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Torus(#[from] TorusError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

// 10-point Gauss–Legendre rule on [−1, 1]; composite over cycle segments.
const GL10_X: [f64; 5] = [
    0.148_874_338_981_631_2,
    0.433_395_394_129_247_2,
    0.679_409_568_299_024_4,
    0.865_063_366_688_984_5,
    0.973_906_528_517_171_7,
];
const GL10_W: [f64; 5] = [
    0.295_524_224_714_752_9,
    0.269_266_719_309_996_3,
    0.219_086_362_515_982_0,
    0.149_451_349_150_580_6,
    0.066_671_344_308_688_14,
];

// 3- and 5-point rules for leafwise segments (the error estimate is their
// disagreement).
const GL3: [(f64, f64); 3] = [
    (-0.774_596_669_241_483_4, 5.0 / 9.0),
    (0.0, 8.0 / 9.0),
    (0.774_596_669_241_483_4, 5.0 / 9.0),
];
const GL5: [(f64, f64); 5] = [
    (-0.906_179_845_938_664_0, 0.236_926_885_056_189_1),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.0, 0.568_888_888_888_888_9),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.906_179_845_938_664_0, 0.236_926_885_056_189_1),
];

/// Value of a quadrature together with its refinement-based error estimate.
#[derive(Clone, Copy, Debug)]
pub struct QuadratureResult {
    pub value: f64,
    pub error_estimate: f64,
    /// Nodes used at the final refinement level.
    pub nodes: usize,
}

// ── Mineur contour integral ─────────────────────────────────────────────────

fn declared_two_form(chart: &TorusChart) -> Result<Structure2Form, ActionError> {
    match &chart.system().spec().structure {
        Some(Structure::Form(w)) => Ok(w.clone()),
        Some(Structure::Poisson(_)) => Err(ActionError::ModeMismatch(
            "contour action needs a 2-form structure, got a Poisson bivector".into(),
        )),
        None => Err(ActionError::ModeMismatch(
            "contour action needs a declared 2-form structure".into(),
        )),
    }
}

/// `μ = ∮_γ α` over the lattice cycle `cycle_index`, by composite
/// Gauss–Legendre along the flow-traced cycle. The primitive is checked
/// first: `dα = ω` within `1e-9` at points of the cycle.
pub fn mineur_action(
    chart: &TorusChart,
    alpha: &[Expr],
    cycle_index: usize,
) -> Result<QuadratureResult, ActionError> {
    let sys = chart.system().clone();
    let m = sys.dim;
    if alpha.len() != m {
        return Err(ActionError::CountMismatch {
            what: "1-form components",
            expected: m,
            got: alpha.len(),
        });
    }
    let omega = declared_two_form(chart)?;
    let basis = &sys.spec().basis;

    let row: Vec<f64> = (0..chart.p())
        .map(|j| chart.lattice[(cycle_index, j)])
        .collect();
    let cycle_field = WeightedSum::new(&sys.fields, row.clone());

    // dα = ω at the seed and at points around the cycle.
    let check_points = flow_sequence(
        &cycle_field,
        &chart.seed,
        &[0.0, 1.0 / 7.0, 2.0 / 7.0, 3.0 / 7.0, 4.0 / 7.0, 5.0 / 7.0, 6.0 / 7.0],
        &chart.ode,
    )?;
    for a in 0..m {
        for b in (a + 1)..m {
            let d_ab = crate::expr::fold_sub(diff_expr(&alpha[b], a), diff_expr(&alpha[a], b));
            for pt in &check_points {
                let residual = (d_ab.eval(pt, basis)? - omega.entry(a, b).eval(pt, basis)?).abs();
                if residual > 1e-9 {
                    return Err(ActionError::PrimitiveMismatch {
                        residual,
                        point: pt.clone(),
                    });
                }
            }
        }
    }

    let alpha_c: Vec<CompiledExpr> = alpha
        .iter()
        .map(|e| e.compile(basis))
        .collect::<Result<_, _>>()?;

    // ∮ α = ∫_0^1 Σ_b α_b(x(s)) ẋ_b(s) ds with ẋ = Σ_i row_i X_i(x).
    let composite = |segments: usize| -> Result<f64, ActionError> {
        let mut nodes = Vec::with_capacity(segments * 10);
        let mut weights = Vec::with_capacity(segments * 10);
        for seg in 0..segments {
            let (a, b) = (seg as f64 / segments as f64, (seg + 1) as f64 / segments as f64);
            let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
            for k in 0..5 {
                for sgn in [-1.0, 1.0] {
                    nodes.push(mid + half * sgn * GL10_X[k]);
                    weights.push(half * GL10_W[k]);
                }
            }
        }
        let order: Vec<usize> = {
            let mut idx: Vec<usize> = (0..nodes.len()).collect();
            idx.sort_by(|&i, &j| nodes[i].partial_cmp(&nodes[j]).unwrap());
            idx
        };
        let sorted: Vec<f64> = order.iter().map(|&i| nodes[i]).collect();
        let states = flow_sequence(&cycle_field, &chart.seed, &sorted, &chart.ode)?;
        let mut velocity = vec![0.0; m];
        let mut total = 0.0;
        for (pos, &i) in order.iter().enumerate() {
            let x = &states[pos];
            cycle_field.eval_into(x, &mut velocity);
            let f: f64 = (0..m).map(|b| alpha_c[b].eval(x) * velocity[b]).sum();
            total += weights[i] * f;
        }
        Ok(total)
    };

    let mut segments = 4;
    let mut prev = composite(segments)?;
    loop {
        segments *= 2;
        let cur = composite(segments)?;
        let err = (cur - prev).abs();
        if err <= 1e-8 * cur.abs().max(1.0) || segments >= 128 {
            return Ok(QuadratureResult {
                value: cur,
                error_estimate: err,
                nodes: segments * 10,
            });
        }
        prev = cur;
    }
}

/// Action values and traced basis cycles of one torus.
#[derive(Clone, Debug)]
pub struct ActionProfile {
    /// Invariant levels identifying the torus.
    pub torus: Vec<f64>,
    pub mu: Vec<f64>,
    /// One closed polyline per lattice generator (65 points, endpoints
    /// coinciding within the return tolerance).
    pub cycles: Vec<Vec<Vec<f64>>>,
    pub quadrature_errors: Vec<f64>,
}

/// Mineur actions for every lattice generator of the chart.
pub fn action_profile(chart: &TorusChart, alpha: &[Expr]) -> Result<ActionProfile, ActionError> {
    let sys = chart.system().clone();
    let p = chart.p();
    let mut mu = Vec::with_capacity(p);
    let mut errs = Vec::with_capacity(p);
    let mut cycles = Vec::with_capacity(p);
    let times: Vec<f64> = (0..=64).map(|k| k as f64 / 64.0).collect();
    for i in 0..p {
        let q = mineur_action(chart, alpha, i)?;
        mu.push(q.value);
        errs.push(q.error_estimate);
        let row: Vec<f64> = (0..p).map(|j| chart.lattice[(i, j)]).collect();
        let field = WeightedSum::new(&sys.fields, row);
        cycles.push(flow_sequence(&field, &chart.seed, &times, &chart.ode)?);
    }
    Ok(ActionProfile {
        torus: chart.levels.clone(),
        mu,
        cycles,
        quadrature_errors: errs,
    })
}

// ── leafwise path integral ──────────────────────────────────────────────────

/// Action samples along a path of tori, anchored at `μ = 0` on the first
/// (reference) chart.
#[derive(Clone, Debug)]
pub struct LeafwiseActions {
    pub mu: Vec<f64>,
    /// Max per-segment disagreement of the 3- vs 5-point rules.
    pub quadrature_error: f64,
    /// Direct-vs-detour disagreement measured on the first segment.
    pub path_consistency: f64,
}

/// The integrand of `ρ = Σ_i c_i dH_i` pulled back to a straight seed path:
/// at each quadrature node the period lattice is recomputed and aligned to
/// the reference basis so `c` follows one homology class across leaves.
fn leaf_segment(
    sys: &CompiledSystem,
    reference: &DMatrix<f64>,
    seed_a: &[f64],
    seed_b: &[f64],
    cycle_index: usize,
    grads: &[Vec<CompiledExpr>],
    tols: &Tolerances,
    rule: &[(f64, f64)],
) -> Result<f64, ActionError> {
    let m = sys.dim;
    let p = sys.p();
    let dir: Vec<f64> = seed_b.iter().zip(seed_a).map(|(b, a)| b - a).collect();
    let mut total = 0.0;
    for &(xi, w) in rule {
        let s = 0.5 * (xi + 1.0);
        let seed: Vec<f64> = seed_a.iter().zip(&dir).map(|(a, d)| a + s * d).collect();
        let lattice = find_period_lattice(sys, &seed, tols)?;
        let u = unimodular_relation(reference, &lattice, 0.2).ok_or(ActionError::FamilyAlignment)?;
        let aligned = &u * &lattice;
        let mut g = 0.0;
        for i in 0..p {
            let c_i = aligned[(cycle_index, i)];
            let dh_ds: f64 = (0..m).map(|b| grads[i][b].eval(&seed) * dir[b]).sum();
            g += c_i * dh_ds;
        }
        total += 0.5 * w * g;
    }
    Ok(total)
}

/// Path-integrates `ρ = Σ_i c_i dH_i` from the first chart's torus to each
/// subsequent one. The first segment is re-integrated along a homotopic
/// detour (through a flow-displaced midpoint) and the two must agree within
/// `1e-6`; a disagreement means `ρ` is not closed, i.e. the declared
/// Hamiltonians are not actually invariants.
pub fn leafwise_action(
    charts: &[TorusChart],
    hamiltonians: &[Expr],
    cycle_index: usize,
    tols: &Tolerances,
) -> Result<LeafwiseActions, ActionError> {
    assert!(!charts.is_empty());
    let sys = charts[0].system().clone();
    let p = sys.p();
    if hamiltonians.len() != p {
        return Err(ActionError::CountMismatch {
            what: "Hamiltonians",
            expected: p,
            got: hamiltonians.len(),
        });
    }
    let basis = &sys.spec().basis;
    let grads: Vec<Vec<CompiledExpr>> = hamiltonians
        .iter()
        .map(|h| {
            (0..sys.dim)
                .map(|b| diff_expr(h, b).compile(basis))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    let reference = &charts[0].lattice;

    let mut mu = vec![0.0];
    let mut qerr = 0.0f64;
    for pair in charts.windows(2) {
        let (a, b) = (&pair[0].seed, &pair[1].seed);
        let i3 = leaf_segment(&sys, reference, a, b, cycle_index, &grads, tols, &GL3)?;
        let i5 = leaf_segment(&sys, reference, a, b, cycle_index, &grads, tols, &GL5)?;
        qerr = qerr.max((i5 - i3).abs());
        mu.push(mu.last().unwrap() + i5);
    }

    // Homotopic detour on the first segment: displace the midpoint along the
    // first commuting flow (which stays on its leaf) and integrate A → D → B.
    let mut consistency = 0.0;
    if charts.len() >= 2 {
        let (a, b) = (&charts[0].seed, &charts[1].seed);
        let mid: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
        let tau = 0.3 * charts[0].lattice.row(0).iter().map(|v| v.abs()).sum::<f64>();
        let detour_pt = flow_to(&sys.fields[0], &mid, tau, &tols.ode)?;
        let direct = mu[1];
        let leg1 = leaf_segment(&sys, reference, a, &detour_pt, cycle_index, &grads, tols, &GL5)?;
        let leg2 = leaf_segment(&sys, reference, &detour_pt, b, cycle_index, &grads, tols, &GL5)?;
        let detour = leg1 + leg2;
        consistency = (direct - detour).abs();
        if consistency > 1e-6 {
            return Err(ActionError::PathInconsistency { direct, detour });
        }
    }

    Ok(LeafwiseActions {
        mu,
        quadrature_error: qerr,
        path_consistency: consistency,
    })
}

// ── Hamiltonianity of the torus action ──────────────────────────────────────

/// Action values across a [`ChartFamily`] stencil: `center[i]`, and
/// `minus[k][i]`/`plus[k][i]` per stencil direction `k`, all for the
/// family-aligned lattice row `i`.
#[derive(Clone, Debug)]
pub struct ActionSamples {
    pub center: Vec<f64>,
    pub minus: Vec<Vec<f64>>,
    pub plus: Vec<Vec<f64>>,
}

/// Mineur actions of every generator on every chart of the family.
pub fn mineur_family_samples(
    family: &ChartFamily,
    alpha: &[Expr],
) -> Result<ActionSamples, ActionError> {
    let per_chart = |chart: &TorusChart| -> Result<Vec<f64>, ActionError> {
        (0..chart.p())
            .map(|i| Ok(mineur_action(chart, alpha, i)?.value))
            .collect()
    };
    Ok(ActionSamples {
        center: per_chart(&family.center)?,
        minus: family.minus.iter().map(&per_chart).collect::<Result<_, _>>()?,
        plus: family.plus.iter().map(&per_chart).collect::<Result<_, _>>()?,
    })
}

#[derive(Clone, Debug)]
pub struct VerifyActionReport {
    /// `max_x |Z_i⌟ω + dμ_i|` per generator `i`.
    pub residuals: Vec<f64>,
    pub max_residual: f64,
    /// `∂μ_i/∂z_j` from the stencil differences.
    pub dmu_dz: DMatrix<f64>,
    /// `max_residual ≤ 1e-4` (the bound is set by the stencil differences).
    pub pass: bool,
}

/// Checks `Z_i ⌟ ω = −dμ_i` for the period-1 angle generators `Z_i`.
/// `dμ_i` is assembled from the stencil derivatives `∂μ_i/∂z_j` and the
/// exact gradients of the invariants: `dμ_i = Σ_j (∂μ_i/∂z_j) dF_j`.
pub fn verify_action(
    family: &ChartFamily,
    samples: &ActionSamples,
    omega: &Structure2Form,
    grid: usize,
) -> Result<VerifyActionReport, ActionError> {
    let chart = &family.center;
    let sys = chart.system().clone();
    let (m, p, q) = (sys.dim, sys.p(), sys.q());
    let basis = &sys.spec().basis;

    let dmu_ds = DMatrix::from_fn(p, q, |i, k| {
        (samples.plus[k][i] - samples.minus[k][i]) / (2.0 * family.step)
    });
    let dmu_dz = &dmu_ds * &family.ds_dz;

    let omega_c = omega.compile(basis)?;
    let grad_f: Vec<Vec<CompiledExpr>> = sys
        .spec()
        .integrals
        .iter()
        .map(|f| {
            (0..m)
                .map(|b| diff_expr(f, b).compile(basis))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;

    let mut w = DMatrix::zeros(m, m);
    let mut residuals = vec![0.0f64; p];
    for (_, x) in chart.sample_grid(grid)? {
        omega_c.eval_into(&x, &mut w);
        let frame = chart.angle_frame(&x);
        for i in 0..p {
            for b in 0..m {
                let contraction: f64 = (0..m).map(|a| frame[(a, i)] * w[(a, b)]).sum();
                let dmu_b: f64 = (0..q)
                    .map(|j| dmu_dz[(i, j)] * grad_f[j][b].eval(&x))
                    .sum();
                residuals[i] = residuals[i].max((contraction + dmu_b).abs());
            }
        }
    }
    let max_residual = residuals.iter().cloned().fold(0.0, f64::max);
    Ok(VerifyActionReport {
        residuals,
        max_residual,
        dmu_dz,
        pass: max_residual <= 1e-4,
    })
}

// ── normal-form assembly ────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormalFormMode {
    General2Form,
    AlmostSymplectic,
    Symplectic,
    Superintegrable,
    Poisson,
}

#[derive(Clone, Debug)]
pub struct NormalFormReport {
    pub mode: NormalFormMode,
    /// Max `|ω(E_θi, E_θj)|` (or the Poisson θθ block) over samples.
    pub isotropy: f64,
    /// Averaged pairing of angle and transverse directions: for 2-forms
    /// `ω(E_θi, E_zk) = −∂μ_i/∂z_k`; for Poisson the `θz` block of the
    /// frame bivector.
    pub action_angle_block: DMatrix<f64>,
    pub action_angle_spread: f64,
    /// Averaged transverse-transverse block `b_{kl}(z)` at the center torus.
    pub magnetic: DMatrix<f64>,
    pub magnetic_spread: f64,
    /// `‖db‖∞` estimated across the stencil (exactly 0 when q < 3).
    pub magnetic_closedness_defect: f64,
    /// Symplectic mode: `∂a_i/∂μ_l` of the angle shift `θ = θ̃ − a(μ)`.
    pub angle_shift: Option<DMatrix<f64>>,
    /// Mode-specific final residual: symplectic — max deviation of the
    /// shifted frame from the canonical block form; other modes — max
    /// θ-spread of the frame components (how well-defined the normal form
    /// coefficients are).
    pub residual: f64,
    /// Rank of the action-angle pairing block.
    pub transverse_rank: usize,
    /// `p − transverse_rank`.
    pub overdetermination: usize,
}

/// Refuses `p` commuting fields when `p > m − rank(structure at seed)/2`.
pub fn check_dimension_bound(
    p: usize,
    structure: &Structure,
    x0: &[f64],
    basis: &crate::expr::IrrationalBasis,
) -> Result<(), ActionError> {
    let (m, rank) = match structure {
        Structure::Form(w) => (w.dim(), w.rank_at(x0, basis)?),
        Structure::Poisson(b) => (b.dim(), b.rank_at(x0, basis)?),
    };
    let bound = m - rank / 2;
    if p > bound {
        return Err(ActionError::DimensionBound { p, bound });
    }
    Ok(())
}

/// Max `|ω(X_i, X_j)|` (or `|Π(dH_i, dH_j)|`) over sampled torus points —
/// the isotropy of the Liouville torus.
pub fn isotropy_check(
    chart: &TorusChart,
    structure: &Structure,
    hamiltonians: Option<&[Expr]>,
    n_samples: usize,
) -> Result<f64, ActionError> {
    let sys = chart.system().clone();
    let (m, p) = (sys.dim, sys.p());
    let basis = &sys.spec().basis;
    let per_axis = (n_samples as f64).powf(1.0 / p as f64).ceil().max(2.0) as usize;

    let mut max = 0.0f64;
    match structure {
        Structure::Form(w) => {
            let wc = w.compile(basis)?;
            let mut wm = DMatrix::zeros(m, m);
            let mut vals = vec![vec![0.0; m]; p];
            for theta in TorusChart::theta_grid(p, per_axis) {
                let x = chart.point_at(&theta)?;
                wc.eval_into(&x, &mut wm);
                for (i, f) in sys.fields.iter().enumerate() {
                    f.eval_into(&x, &mut vals[i]);
                }
                for i in 0..p {
                    for j in (i + 1)..p {
                        let v: f64 = (0..m)
                            .map(|a| {
                                (0..m).map(|b| vals[i][a] * wm[(a, b)] * vals[j][b]).sum::<f64>()
                            })
                            .sum();
                        max = max.max(v.abs());
                    }
                }
            }
        }
        Structure::Poisson(bi) => {
            let hams = hamiltonians.ok_or_else(|| {
                ActionError::ModeMismatch(
                    "isotropy on a Poisson structure needs declared Hamiltonians".into(),
                )
            })?;
            if hams.len() != p {
                return Err(ActionError::CountMismatch {
                    what: "Hamiltonians",
                    expected: p,
                    got: hams.len(),
                });
            }
            let bc = bi.compile(basis)?;
            let grads: Vec<Vec<CompiledExpr>> = hams
                .iter()
                .map(|h| {
                    (0..m)
                        .map(|b| diff_expr(h, b).compile(basis))
                        .collect::<Result<Vec<_>, _>>()
                })
                .collect::<Result<_, _>>()?;
            let mut pm = DMatrix::zeros(m, m);
            for theta in TorusChart::theta_grid(p, per_axis) {
                let x = chart.point_at(&theta)?;
                bc.eval_into(&x, &mut pm);
                for i in 0..p {
                    for j in (i + 1)..p {
                        let v: f64 = (0..m)
                            .map(|a| {
                                (0..m)
                                    .map(|b| grads[i][a].eval(&x) * pm[(a, b)] * grads[j][b].eval(&x))
                                    .sum::<f64>()
                            })
                            .sum();
                        max = max.max(v.abs());
                    }
                }
            }
        }
    }
    Ok(max)
}

/// The transverse coordinate frame `E_{z_k}` at angle `θ` on `chart`:
/// variational transport of the seed velocities plus the lattice-shear
/// correction `Σ_i (θ·∂L/∂z_k)_i X_i(x)` from the θ-dependence of the flow
/// times `t = θ·L(z)`.
fn transverse_frame(
    sys: &CompiledSystem,
    chart: &TorusChart,
    seed_vels: &[Vec<f64>],
    dlattice_dz: &[DMatrix<f64>],
    theta: &[f64],
) -> Result<(Vec<f64>, DMatrix<f64>), ActionError> {
    let (m, p) = (sys.dim, sys.p());
    let q = seed_vels.len();
    let t = chart.flow_times(theta);
    let sum = WeightedSum::new(&sys.fields, t);
    let var = VariationalField::new(&sum, q);
    let state0 = JointVariational::pack(&chart.seed, seed_vels);
    let end = flow_to(&var, &state0, 1.0, &chart.ode)?;
    let (x, mut cols) = JointVariational::unpack(&end, m);

    let mut field_vals = vec![vec![0.0; m]; p];
    for (i, f) in sys.fields.iter().enumerate() {
        f.eval_into(&x, &mut field_vals[i]);
    }
    for (k, col) in cols.iter_mut().enumerate() {
        for i in 0..p {
            let w: f64 = (0..p).map(|j| theta[j] * dlattice_dz[k][(j, i)]).sum();
            for a in 0..m {
                col[a] += w * field_vals[i][a];
            }
        }
    }
    let ez = DMatrix::from_fn(m, q, |a, k| cols[k][a]);
    Ok((x, ez))
}

/// θθ, θz and zz blocks of the structure in the chart frame at one angle.
struct FrameBlocks {
    theta_theta: DMatrix<f64>,
    theta_z: DMatrix<f64>,
    z_z: DMatrix<f64>,
}

fn form_blocks(
    w: &DMatrix<f64>,
    e_theta: &DMatrix<f64>,
    e_z: &DMatrix<f64>,
) -> FrameBlocks {
    FrameBlocks {
        theta_theta: e_theta.transpose() * w * e_theta,
        theta_z: e_theta.transpose() * w * e_z,
        z_z: e_z.transpose() * w * e_z,
    }
}

fn matrix_mean(samples: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut acc = samples[0].clone();
    for s in &samples[1..] {
        acc += s;
    }
    acc / samples.len() as f64
}

fn matrix_spread(samples: &[DMatrix<f64>], mean: &DMatrix<f64>) -> f64 {
    samples
        .iter()
        .map(|s| (s - mean).amax())
        .fold(0.0, f64::max)
}

fn svd_rank(m: &DMatrix<f64>, rel: f64) -> usize {
    let svd = m.clone().svd(false, false);
    let max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    svd.singular_values.iter().filter(|&&s| s > rel * max).count()
}

/// Magnetic blocks of one chart of the family (reusing the center chart's
/// stencil derivative data; first-order accurate across the stencil, which
/// is all the closedness estimate needs).
fn chart_zz_block(
    sys: &CompiledSystem,
    chart: &TorusChart,
    family: &ChartFamily,
    omega_c: &crate::geometry::CompiledAntisym,
    thetas: &[Vec<f64>],
) -> Result<DMatrix<f64>, ActionError> {
    let m = sys.dim;
    let q = sys.q();
    let seed_vels: Vec<Vec<f64>> = (0..q).map(|j| family.seed_velocity(j)).collect();
    let mut w = DMatrix::zeros(m, m);
    let mut acc = DMatrix::zeros(q, q);
    for theta in thetas {
        let (x, e_z) = transverse_frame(sys, chart, &seed_vels, &family.dlattice_dz, theta)?;
        omega_c.eval_into(&x, &mut w);
        acc += e_z.transpose() * &w * &e_z;
    }
    Ok(acc / thetas.len() as f64)
}

/// Expresses the declared structure in the chart frame over a θ-grid and
/// reports how close it is to the action-angle normal form of the requested
/// mode. In symplectic mode the transverse directions are re-coordinated to
/// the actions (via the pairing block, which *is* `−∂μ/∂z`) and the angle
/// shift `θ = θ̃ − a(μ)` removing the magnetic term is solved for; the
/// residual then measures the distance to `Σ dμ_i ∧ dθ_i` exactly.
pub fn assemble_normal_form(
    family: &ChartFamily,
    structure: &Structure,
    mode: NormalFormMode,
    grid: usize,
) -> Result<NormalFormReport, ActionError> {
    let chart = &family.center;
    let sys = chart.system().clone();
    let (m, p, q) = (sys.dim, sys.p(), sys.q());
    let basis = &sys.spec().basis;

    check_dimension_bound(p, structure, &chart.seed, basis)?;

    if let Structure::Poisson(_) = structure {
        if mode != NormalFormMode::Poisson {
            return Err(ActionError::ModeMismatch(format!(
                "{mode:?} mode needs a 2-form, got a Poisson bivector"
            )));
        }
        return poisson_normal_form(family, structure, grid);
    }
    let omega = match structure {
        Structure::Form(w) => w,
        Structure::Poisson(_) => unreachable!(),
    };
    if mode == NormalFormMode::Poisson {
        return Err(ActionError::ModeMismatch(
            "poisson mode needs a Poisson bivector, got a 2-form".into(),
        ));
    }

    let rank = omega.rank_at(&chart.seed, basis)?;
    match mode {
        NormalFormMode::AlmostSymplectic | NormalFormMode::Symplectic => {
            if rank < m {
                return Err(ActionError::ModeMismatch(format!(
                    "ω has rank {rank} < {m} at the seed; not (almost-)symplectic"
                )));
            }
        }
        _ => {}
    }
    if mode == NormalFormMode::Symplectic {
        if p != q {
            return Err(ActionError::ModeMismatch(format!(
                "symplectic action-angle form needs p = q, got p = {p}, q = {q}"
            )));
        }
        if !omega.is_symbolically_closed() {
            let defect = omega
                .d_components()
                .iter()
                .map(|(_, _, _, e)| e.eval(&chart.seed, basis).map(f64::abs))
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .fold(0.0, f64::max);
            if defect > 1e-10 {
                return Err(ActionError::ModeMismatch(format!(
                    "dω ≠ 0 (defect {defect:.3e} at the seed); not symplectic"
                )));
            }
        }
    }

    let omega_c = omega.compile(basis)?;
    let seed_vels: Vec<Vec<f64>> = (0..q).map(|j| family.seed_velocity(j)).collect();
    let thetas = TorusChart::theta_grid(p, grid.max(2));

    let mut w = DMatrix::zeros(m, m);
    let mut blocks: Vec<FrameBlocks> = Vec::with_capacity(thetas.len());
    let mut frames: Vec<(Vec<f64>, DMatrix<f64>, DMatrix<f64>)> = Vec::with_capacity(thetas.len());
    for theta in &thetas {
        let (x, e_z) = transverse_frame(&sys, chart, &seed_vels, &family.dlattice_dz, theta)?;
        let e_theta = chart.angle_frame(&x);
        omega_c.eval_into(&x, &mut w);
        blocks.push(form_blocks(&w, &e_theta, &e_z));
        frames.push((x, e_theta, e_z));
    }

    let isotropy = blocks
        .iter()
        .map(|b| b.theta_theta.amax())
        .fold(0.0, f64::max);
    let tz: Vec<DMatrix<f64>> = blocks.iter().map(|b| b.theta_z.clone()).collect();
    let zz: Vec<DMatrix<f64>> = blocks.iter().map(|b| b.z_z.clone()).collect();
    let pairing = matrix_mean(&tz);
    let pairing_spread = matrix_spread(&tz, &pairing);
    let magnetic = matrix_mean(&zz);
    let magnetic_spread = matrix_spread(&zz, &magnetic);
    let transverse_rank = svd_rank(&pairing, 1e-8);

    // db across the stencil; a 3-form in z, so identically zero below q = 3.
    let closedness = if q < 3 {
        0.0
    } else {
        let mut db_max = 0.0f64;
        let mut b_plus = Vec::with_capacity(q);
        let mut b_minus = Vec::with_capacity(q);
        for k in 0..q {
            b_plus.push(chart_zz_block(&sys, &family.plus[k], family, &omega_c, &thetas)?);
            b_minus.push(chart_zz_block(&sys, &family.minus[k], family, &omega_c, &thetas)?);
        }
        // ∂b/∂z_j = Σ_k (∂b/∂s_k)(∂s_k/∂z_j)
        let db_dz: Vec<DMatrix<f64>> = (0..q)
            .map(|j| {
                let mut acc = DMatrix::zeros(q, q);
                for k in 0..q {
                    acc += (&b_plus[k] - &b_minus[k]) / (2.0 * family.step) * family.ds_dz[(k, j)];
                }
                acc
            })
            .collect();
        for j in 0..q {
            for k in (j + 1)..q {
                for l in (k + 1)..q {
                    let v = db_dz[j][(k, l)] + db_dz[k][(l, j)] + db_dz[l][(j, k)];
                    db_max = db_max.max(v.abs());
                }
            }
        }
        db_max
    };

    if mode != NormalFormMode::Symplectic {
        let residual = pairing_spread.max(magnetic_spread).max(isotropy);
        return Ok(NormalFormReport {
            mode,
            isotropy,
            action_angle_block: pairing,
            action_angle_spread: pairing_spread,
            magnetic,
            magnetic_spread,
            magnetic_closedness_defect: closedness,
            angle_shift: None,
            residual,
            transverse_rank,
            overdetermination: p - transverse_rank,
        });
    }

    // Symplectic mode: transverse re-coordinate z → μ. The pairing block is
    // ω(E_θi, E_zk) = −∂μ_i/∂z_k, so E_μ = E_z·(∂z/∂μ) needs no separately
    // computed actions.
    let dmu_dz = -&pairing;
    let dz_dmu = dmu_dz
        .clone()
        .try_inverse()
        .ok_or_else(|| ActionError::ModeMismatch("action pairing block is singular".into()))?;

    let beta: Vec<DMatrix<f64>> = frames
        .iter()
        .map(|(x, _, e_z)| {
            omega_c.eval_into(x, &mut w);
            let e_mu = e_z * &dz_dmu;
            e_mu.transpose() * &w * &e_mu
        })
        .collect();
    let beta_mean = matrix_mean(&beta);
    // θ̃ = θ + a(μ) with ∂a_i/∂μ_l = A_il kills the magnetic block when
    // A − Aᵀ = −β; the antisymmetric solution is A = −β/2.
    let shift = -&beta_mean * 0.5;

    let mut residual = 0.0f64;
    for (x, e_theta, e_z) in &frames {
        omega_c.eval_into(x, &mut w);
        let e_mu = e_z * &dz_dmu + e_theta * &shift;
        let tt = e_theta.transpose() * &w * e_theta;
        let tm = e_theta.transpose() * &w * &e_mu;
        let mm = e_mu.transpose() * &w * &e_mu;
        residual = residual.max(tt.amax());
        residual = residual.max(mm.amax());
        let target = DMatrix::from_diagonal(&DVector::from_element(p, -1.0));
        residual = residual.max((tm - target).amax());
    }

    Ok(NormalFormReport {
        mode,
        isotropy,
        action_angle_block: pairing,
        action_angle_spread: pairing_spread,
        magnetic,
        magnetic_spread,
        magnetic_closedness_defect: closedness,
        angle_shift: Some(shift),
        residual,
        transverse_rank,
        overdetermination: p - transverse_rank,
    })
}

/// Poisson-mode frame change: `Π_frame = A⁻¹ Π A⁻ᵀ` with `A = [E_θ | E_z]`.
fn poisson_normal_form(
    family: &ChartFamily,
    structure: &Structure,
    grid: usize,
) -> Result<NormalFormReport, ActionError> {
    let bivector = match structure {
        Structure::Poisson(b) => b,
        Structure::Form(_) => unreachable!(),
    };
    let chart = &family.center;
    let sys = chart.system().clone();
    let (m, p, q) = (sys.dim, sys.p(), sys.q());
    let basis = &sys.spec().basis;
    let pi_c = bivector.compile(basis)?;
    let seed_vels: Vec<Vec<f64>> = (0..q).map(|j| family.seed_velocity(j)).collect();

    let mut pi = DMatrix::zeros(m, m);
    let mut tt_max = 0.0f64;
    let mut tz: Vec<DMatrix<f64>> = Vec::new();
    let mut zz: Vec<DMatrix<f64>> = Vec::new();
    for theta in TorusChart::theta_grid(p, grid.max(2)) {
        let (x, e_z) = transverse_frame(&sys, chart, &seed_vels, &family.dlattice_dz, &theta)?;
        let e_theta = chart.angle_frame(&x);
        let mut a = DMatrix::zeros(m, m);
        for i in 0..p {
            a.set_column(i, &e_theta.column(i));
        }
        for k in 0..q {
            a.set_column(p + k, &e_z.column(k));
        }
        let a_inv = a
            .try_inverse()
            .ok_or_else(|| ActionError::ModeMismatch("chart frame is singular".into()))?;
        pi_c.eval_into(&x, &mut pi);
        let pi_frame = &a_inv * &pi * a_inv.transpose();
        tt_max = tt_max.max(pi_frame.view((0, 0), (p, p)).amax());
        tz.push(pi_frame.view((0, p), (p, q)).into_owned());
        zz.push(pi_frame.view((p, p), (q, q)).into_owned());
    }
    let pairing = matrix_mean(&tz);
    let pairing_spread = matrix_spread(&tz, &pairing);
    let casimir_block = matrix_mean(&zz);
    let casimir_spread = matrix_spread(&zz, &casimir_block);
    let transverse_rank = svd_rank(&pairing, 1e-8);

    Ok(NormalFormReport {
        mode: NormalFormMode::Poisson,
        isotropy: tt_max,
        action_angle_block: pairing,
        action_angle_spread: pairing_spread,
        magnetic: casimir_block,
        magnetic_spread: casimir_spread,
        magnetic_closedness_defect: 0.0,
        angle_shift: None,
        residual: pairing_spread.max(casimir_spread).max(tt_max),
        transverse_rank,
        overdetermination: p - transverse_rank,
    })
}

// ── co-affine charts ────────────────────────────────────────────────────────

/// Sampled action map of a torus family with its numerical rank; rank
/// deficiency is the over-determination degree of the induced co-affine
/// structure.
#[derive(Clone, Debug)]
pub struct CoaffineChart {
    pub mu: Vec<Vec<f64>>,
    pub base_dim: usize,
    pub rank: usize,
    pub overdetermination: usize,
}

/// Rank analysis of action vectors across a family. Rank is measured on
/// the differences to the first sample (SVD, relative cutoff `1e-8`), and
/// consecutive windows must agree on it or the family is flagged unstable.
pub fn coaffine_chart(mu: &[Vec<f64>], base_dim: usize) -> Result<CoaffineChart, ActionError> {
    assert!(mu.len() >= 2, "need at least two tori to measure a rank");
    let p = mu[0].len();
    let diff_rank = |rows: &[Vec<f64>]| -> usize {
        let base = &rows[0];
        let d = DMatrix::from_fn(rows.len() - 1, p, |i, j| rows[i + 1][j] - base[j]);
        svd_rank(&d, 1e-8)
    };
    let rank = diff_rank(mu);

    // Window size p+1 gives each window enough differences to express `rank`.
    let window = (p + 1).min(mu.len());
    if mu.len() > window {
        let ranks: Vec<usize> = (0..=mu.len() - window)
            .map(|s| diff_rank(&mu[s..s + window]))
            .collect();
        if ranks.iter().any(|&r| r != rank) {
            return Err(ActionError::RankUnstable { ranks });
        }
    }

    Ok(CoaffineChart {
        mu: mu.to_vec(),
        base_dim,
        rank,
        overdetermination: p - rank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_expr, parse_expr_with, IrrationalBasis};
    use crate::geometry::VectorFieldExpr;
    use crate::torus::{build_chart, build_chart_family, SystemSpec};

    const TAU: f64 = std::f64::consts::TAU;

    fn names(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    fn single_oscillator(structure: Option<Structure>) -> SystemSpec {
        let vars = names(&["x", "y"]);
        let f = |s: &str| parse_expr(s, &vars).unwrap();
        let field = VectorFieldExpr::new(vec![f("-y"), f("x")]);
        let spec = SystemSpec::new(
            2,
            vec![field],
            vec![f("(x^2 + y^2)/2")],
            IrrationalBasis::empty(),
        )
        .unwrap();
        match structure {
            Some(s) => spec.with_structure(s),
            None => spec,
        }
    }

    fn oscillator_pair(extra_form: bool) -> SystemSpec {
        let vars = names(&["x1", "y1", "x2", "y2"]);
        let mut basis = IrrationalBasis::empty();
        basis.declare("sqrt2", "1.4142135623730951").unwrap();
        let f = |s: &str| parse_expr_with(s, &vars, &["sqrt2".into()]).unwrap();
        let x1 = VectorFieldExpr::new(vec![f("-y1"), f("x1"), f("0"), f("0")]);
        let x2 = VectorFieldExpr::new(vec![f("0"), f("0"), f("-sqrt2*y2"), f("sqrt2*x2")]);
        let h1 = f("(x1^2 + y1^2)/2");
        let h2 = f("sqrt2*(x2^2 + y2^2)/2");

        let mut omega = Structure2Form::canonical_pairs(4, &[(0, 1), (2, 3)]).unwrap();
        if extra_form {
            // ω + dF1∧dF2: still closed, same Hamiltonian fields, but a
            // magnetic zz-block appears in the chart frame.
            let mut entries = Vec::new();
            for a in 0..4 {
                for b in (a + 1)..4 {
                    let extra = crate::expr::fold_sub(
                        crate::expr::fold_mul(diff_expr(&h1, a), diff_expr(&h2, b)),
                        crate::expr::fold_mul(diff_expr(&h1, b), diff_expr(&h2, a)),
                    );
                    entries.push((a, b, crate::expr::fold_add(omega.entry(a, b), extra)));
                }
            }
            omega = Structure2Form::from_entries(4, entries).unwrap();
        }

        SystemSpec::new(4, vec![x1, x2], vec![h1, h2], basis)
            .unwrap()
            .with_structure(Structure::Form(omega))
    }

    fn osc_alpha_xdy() -> Vec<Expr> {
        let vars = names(&["x", "y"]);
        vec![parse_expr("0", &vars).unwrap(), parse_expr("x", &vars).unwrap()]
    }

    #[test]
    fn mineur_oscillator_two_primitives_agree() {
        let spec = single_oscillator(Some(Structure::Form(Structure2Form::canonical_pairs(2, &[(0, 1)]).unwrap())));
        let sys = spec.compile().unwrap();
        let chart = build_chart(&sys, &[1.0, 0.0], &Tolerances::default()).unwrap();

        let a1 = mineur_action(&chart, &osc_alpha_xdy(), 0).unwrap();
        assert!((a1.value - TAU * 0.5).abs() < 1e-8, "μ = {}", a1.value);
        assert!(a1.error_estimate <= 1e-8);

        let vars = names(&["x", "y"]);
        let sym = vec![
            parse_expr("-y/2", &vars).unwrap(),
            parse_expr("x/2", &vars).unwrap(),
        ];
        let a2 = mineur_action(&chart, &sym, 0).unwrap();
        assert!((a1.value - a2.value).abs() < 1e-8);
    }

    #[test]
    fn mineur_rejects_wrong_primitive() {
        let spec = single_oscillator(Some(Structure::Form(Structure2Form::canonical_pairs(2, &[(0, 1)]).unwrap())));
        let sys = spec.compile().unwrap();
        let chart = build_chart(&sys, &[1.0, 0.0], &Tolerances::default()).unwrap();
        let vars = names(&["x", "y"]);
        let alpha = vec![
            parse_expr("0", &vars).unwrap(),
            parse_expr("2*x", &vars).unwrap(),
        ];
        let err = mineur_action(&chart, &alpha, 0).unwrap_err();
        assert!(matches!(err, ActionError::PrimitiveMismatch { .. }), "{err}");
    }

    #[test]
    fn leafwise_matches_mineur_increments() {
        let spec = single_oscillator(Some(Structure::Form(Structure2Form::canonical_pairs(2, &[(0, 1)]).unwrap())));
        let sys = spec.compile().unwrap();
        let tols = Tolerances::default();
        let seeds = [
            vec![1.0, 0.0],
            vec![2.0f64.sqrt(), 0.0],
            vec![3.0f64.sqrt(), 0.0],
        ];
        let charts: Vec<_> = seeds
            .iter()
            .map(|s| build_chart(&sys, s, &tols).unwrap())
            .collect();

        let h = spec.integrals[0].clone();
        let lw = leafwise_action(&charts, &[h], 0, &tols).unwrap();
        assert!(lw.path_consistency <= 1e-6);

        let mineur: Vec<f64> = charts
            .iter()
            .map(|c| mineur_action(c, &osc_alpha_xdy(), 0).unwrap().value)
            .collect();
        // Same increments (leafwise is anchored at μ = 0 on the first torus).
        for k in 0..charts.len() {
            let expect = mineur[k] - mineur[0];
            assert!(
                (lw.mu[k] - expect).abs() < 1e-7,
                "leafwise {} vs mineur increment {}",
                lw.mu[k],
                expect
            );
        }
        // Spread after constant removal.
        let offsets: Vec<f64> = (0..charts.len()).map(|k| mineur[k] - lw.mu[k]).collect();
        let c0 = offsets[0];
        assert!(offsets.iter().all(|o| (o - c0).abs() <= 1e-6));
    }

    #[test]
    fn leafwise_zero_length_path() {
        let spec = single_oscillator(None);
        let sys = spec.compile().unwrap();
        let tols = Tolerances::default();
        let chart = build_chart(&sys, &[1.0, 0.0], &tols).unwrap();
        let h = spec.integrals[0].clone();
        let lw = leafwise_action(&[chart], &[h], 0, &tols).unwrap();
        assert_eq!(lw.mu, vec![0.0]);
    }

    #[test]
    fn leafwise_detects_non_invariant_hamiltonian() {
        // Pendulum: the period varies across leaves, so ρ built from a
        // non-invariant "Hamiltonian" is visibly non-closed.
        let vars = names(&["q", "p"]);
        let f = |s: &str| parse_expr(s, &vars).unwrap();
        let field = VectorFieldExpr::new(vec![f("p"), f("-sin(q)")]);
        let spec = SystemSpec::new(
            2,
            vec![field],
            vec![f("p^2/2 - cos(q)")],
            IrrationalBasis::empty(),
        )
        .unwrap();
        let sys = spec.compile().unwrap();
        let tols = Tolerances::default();
        let charts = vec![
            build_chart(&sys, &[0.0, 1.0], &tols).unwrap(),
            build_chart(&sys, &[0.0, 1.0954451150103324], &tols).unwrap(),
        ];
        let err = leafwise_action(&charts, &[f("p")], 0, &tols).unwrap_err();
        assert!(matches!(err, ActionError::PathInconsistency { .. }), "{err}");
    }

    #[test]
    fn verify_action_accepts_scaled_energy_rejects_raw() {
        let spec = single_oscillator(Some(Structure::Form(Structure2Form::canonical_pairs(2, &[(0, 1)]).unwrap())));
        let sys = spec.compile().unwrap();
        let tols = Tolerances::default();
        let family =
            build_chart_family(&sys, &[1.0, 0.0], &[vec![1.0, 0.0]], 0.02, &tols).unwrap();
        let omega = Structure2Form::canonical_pairs(2, &[(0, 1)]).unwrap();

        // μ = 2πE exactly on each stencil chart.
        let from_levels = |scale: f64| ActionSamples {
            center: vec![scale * family.center.levels[0]],
            minus: vec![vec![scale * family.minus[0].levels[0]]],
            plus: vec![vec![scale * family.plus[0].levels[0]]],
        };
        let good = verify_action(&family, &from_levels(TAU), &omega, 8).unwrap();
        assert!(good.max_residual <= 1e-6, "residual {}", good.max_residual);
        assert!(good.pass);

        let bad = verify_action(&family, &from_levels(1.0), &omega, 8).unwrap();
        assert!(!bad.pass, "residual {}", bad.max_residual);
    }

    #[test]
    fn verify_action_on_mineur_samples() {
        let spec = single_oscillator(Some(Structure::Form(Structure2Form::canonical_pairs(2, &[(0, 1)]).unwrap())));
        let sys = spec.compile().unwrap();
        let tols = Tolerances::default();
        let family =
            build_chart_family(&sys, &[1.0, 0.0], &[vec![1.0, 0.0]], 0.02, &tols).unwrap();
        let samples = mineur_family_samples(&family, &osc_alpha_xdy()).unwrap();
        let omega = Structure2Form::canonical_pairs(2, &[(0, 1)]).unwrap();
        let report = verify_action(&family, &samples, &omega, 8).unwrap();
        assert!(report.pass, "residual {}", report.max_residual);
        // dμ/dE = 2π for the oscillator.
        assert!((report.dmu_dz[(0, 0)] - TAU).abs() < 1e-4);
    }

    #[test]
    fn assemble_symplectic_oscillator_pair() {
        let spec = oscillator_pair(false);
        let sys = spec.compile().unwrap();
        let tols = Tolerances::default();
        let dirs = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]];
        let family =
            build_chart_family(&sys, &[1.0, 0.0, 0.8, 0.0], &dirs, 0.02, &tols).unwrap();
        let structure = spec.structure.clone().unwrap();
        let report =
            assemble_normal_form(&family, &structure, NormalFormMode::Symplectic, 3).unwrap();
        assert!(report.isotropy <= 1e-7, "isotropy {}", report.isotropy);
        assert!(report.magnetic.amax() <= 1e-7, "magnetic {}", report.magnetic);
        assert!(report.residual <= 1e-5, "residual {}", report.residual);
        assert_eq!(report.transverse_rank, 2);
    }

    #[test]
    fn assemble_general_form_reports_magnetic_block() {
        let spec = oscillator_pair(true);
        let sys = spec.compile().unwrap();
        let tols = Tolerances::default();
        let dirs = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]];
        let family =
            build_chart_family(&sys, &[1.0, 0.0, 0.8, 0.0], &dirs, 0.02, &tols).unwrap();
        let structure = spec.structure.clone().unwrap();
        let report =
            assemble_normal_form(&family, &structure, NormalFormMode::General2Form, 3).unwrap();
        // zz block inherits dF1∧dF2(E_z1, E_z2) = 1.
        assert!(
            (report.magnetic[(0, 1)] - 1.0).abs() < 1e-5,
            "magnetic {}",
            report.magnetic
        );
    }

    #[test]
    fn assemble_poisson_cylinder_model() {
        let spec = single_oscillator(Some(Structure::Poisson(
            crate::geometry::PoissonBivector::canonical_pairs(2, &[(0, 1)]).unwrap(),
        )));
        let sys = spec.compile().unwrap();
        let tols = Tolerances::default();
        let family =
            build_chart_family(&sys, &[1.0, 0.0], &[vec![1.0, 0.0]], 0.02, &tols).unwrap();
        let structure = spec.structure.clone().unwrap();
        let report =
            assemble_normal_form(&family, &structure, NormalFormMode::Poisson, 8).unwrap();
        // {θ, z} = dz/dμ = 1/2π, constant on the torus; Casimir block void.
        assert!(report.action_angle_spread <= 1e-6, "{}", report.action_angle_spread);
        assert!(
            (report.action_angle_block[(0, 0)].abs() - 1.0 / TAU).abs() < 1e-6,
            "pairing {}",
            report.action_angle_block[(0, 0)]
        );
        assert!(report.residual <= 1e-6, "residual {}", report.residual);
    }

    #[test]
    fn dimension_bound_refuses_three_fields_on_r4() {
        let omega = Structure::Form(Structure2Form::canonical_pairs(4, &[(0, 1), (2, 3)]).unwrap());
        let err = check_dimension_bound(3, &omega, &[1.0, 0.0, 0.8, 0.0], &IrrationalBasis::empty())
            .unwrap_err();
        assert!(matches!(err, ActionError::DimensionBound { p: 3, bound: 2 }), "{err}");
        // p = 2 is within the bound.
        check_dimension_bound(2, &omega, &[1.0, 0.0, 0.8, 0.0], &IrrationalBasis::empty()).unwrap();
    }

    #[test]
    fn isotropy_of_oscillator_pair_torus() {
        let spec = oscillator_pair(false);
        let sys = spec.compile().unwrap();
        let chart = build_chart(&sys, &[1.0, 0.0, 0.8, 0.0], &Tolerances::default()).unwrap();
        let structure = spec.structure.clone().unwrap();
        let iso = isotropy_check(&chart, &structure, None, 100).unwrap();
        assert!(iso <= 1e-7, "isotropy {iso}");
    }

    #[test]
    fn action_vector_unimodular_covariance() {
        let spec = oscillator_pair(false);
        let sys = spec.compile().unwrap();
        let chart = build_chart(&sys, &[1.0, 0.0, 0.8, 0.0], &Tolerances::default()).unwrap();
        let vars = names(&["x1", "y1", "x2", "y2"]);
        let alpha = vec![
            parse_expr("0", &vars).unwrap(),
            parse_expr("x1", &vars).unwrap(),
            parse_expr("0", &vars).unwrap(),
            parse_expr("x2", &vars).unwrap(),
        ];
        let mu: Vec<f64> = (0..2)
            .map(|i| mineur_action(&chart, &alpha, i).unwrap().value)
            .collect();

        // Change the lattice basis by U = [[1, 1], [0, 1]].
        let u = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let mut chart2 = chart.clone();
        chart2.lattice = &u * &chart.lattice;
        chart2.lattice_inv = chart2.lattice.clone().try_inverse().unwrap();
        let mu2: Vec<f64> = (0..2)
            .map(|i| mineur_action(&chart2, &alpha, i).unwrap().value)
            .collect();
        for i in 0..2 {
            let expect: f64 = (0..2).map(|j| u[(i, j)] * mu[j]).sum();
            assert!((mu2[i] - expect).abs() < 1e-8, "{mu2:?} vs U·{mu:?}");
        }
    }

    #[test]
    fn coaffine_isoenergy_rank_one() {
        let spec = oscillator_pair(false);
        let sys = spec.compile().unwrap();
        let tols = Tolerances::default();
        let vars = names(&["x1", "y1", "x2", "y2"]);
        let alpha = vec![
            parse_expr("0", &vars).unwrap(),
            parse_expr("x1", &vars).unwrap(),
            parse_expr("0", &vars).unwrap(),
            parse_expr("x2", &vars).unwrap(),
        ];
        // Tori on the isoenergy level H1 + H2 = 1.
        let sqrt2 = 2.0f64.sqrt();
        let mut mu = Vec::new();
        for e1 in [0.3f64, 0.5, 0.7] {
            let e2 = 1.0 - e1;
            let r1 = (2.0 * e1).sqrt();
            let r2 = (2.0 * e2 / sqrt2).sqrt();
            let chart = build_chart(&sys, &[r1, 0.0, r2, 0.0], &tols).unwrap();
            let profile = action_profile(&chart, &alpha).unwrap();
            mu.push(profile.mu);
        }
        let co = coaffine_chart(&mu, 1).unwrap();
        assert_eq!(co.rank, 1);
        assert_eq!(co.overdetermination, 1);
        // μ₁ + √2·μ₂ = 2πE on the slice.
        for v in &co.mu {
            let (a, b) = if v[0] > v[1] { (v[0], v[1]) } else { (v[1], v[0]) };
            let combo = if (a + sqrt2 * b - TAU).abs() < (b + sqrt2 * a - TAU).abs() {
                a + sqrt2 * b
            } else {
                b + sqrt2 * a
            };
            assert!((combo - TAU).abs() < 1e-6, "constraint violated: {v:?}");
        }
    }

    #[test]
    fn coaffine_full_rank_family() {
        let mu = vec![
            vec![0.0, 0.0],
            vec![1.0, 0.1],
            vec![2.0, 0.5],
            vec![3.0, 1.2],
        ];
        let co = coaffine_chart(&mu, 2).unwrap();
        assert_eq!(co.rank, 2);
        assert_eq!(co.overdetermination, 0);
    }

    #[test]
    fn coaffine_rank_instability_detected() {
        // First window moves only μ₁, later samples turn on μ₂.
        let mu = vec![
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![2.0, 0.0],
            vec![3.0, 0.0],
            vec![3.0, 1.0],
            vec![3.0, 2.0],
        ];
        let err = coaffine_chart(&mu, 2).unwrap_err();
        assert!(matches!(err, ActionError::RankUnstable { .. }), "{err}");
    }
}
