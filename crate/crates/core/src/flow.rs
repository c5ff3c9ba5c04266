//! Adaptive Dormand–Prince 5(4) integration with FSAL, PI step-size control,
//! and a free 4th-order dense interpolant on every accepted step.
//!
//! Also the vector-field abstraction the higher layers flow along:
//! compiled symbolic fields with exact Jacobians, weighted sums (for flowing
//! along lattice directions `Σ_i t_i X_i`), and the variational extension
//! that transports frame matrices by `dM/dt = DX(x)·M`.

use thiserror::Error;

use crate::expr::{diff_expr, simplify, CompiledExpr, EvalError, IrrationalBasis};
use crate::geometry::{HamiltonianField, VectorFieldExpr};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("step size underflow at t = {t:.6e}; state may be approaching a singularity")]
    StepSizeUnderflow { t: f64 },
    #[error("exceeded {max} integration steps at t = {t:.6e}")]
    MaxSteps { t: f64, max: usize },
    #[error("state became non-finite at t = {t:.6e}")]
    NonFinite { t: f64 },
    #[error(transparent)]
    Compile(#[from] EvalError),
}

/// Anything the integrator can flow along.
pub trait FlowField {
    fn dim(&self) -> usize;

    /// Writes `X(x)` into `dx`. Non-finite output aborts the surrounding
    /// integration with [`FlowError::NonFinite`] rather than panicking, so
    /// implementations signal domain failures with NaN.
    fn eval_into(&self, x: &[f64], dx: &mut [f64]);

    /// Row-major Jacobian `∂X^a/∂x^b`. The default is a central difference;
    /// compiled symbolic fields override it with the exact derivative.
    fn jacobian_into(&self, x: &[f64], jac: &mut [f64]) {
        let m = self.dim();
        let mut xs = x.to_vec();
        let mut fp = vec![0.0; m];
        let mut fm = vec![0.0; m];
        for b in 0..m {
            let h = 1e-6 * (1.0 + x[b].abs());
            xs[b] = x[b] + h;
            self.eval_into(&xs, &mut fp);
            xs[b] = x[b] - h;
            self.eval_into(&xs, &mut fm);
            xs[b] = x[b];
            for a in 0..m {
                jac[a * m + b] = (fp[a] - fm[a]) / (2.0 * h);
            }
        }
    }
}

/// A symbolic vector field compiled for fast evaluation, Jacobian included.
#[derive(Clone, Debug)]
pub struct CompiledVectorField {
    dim: usize,
    comps: Vec<CompiledExpr>,
    jac: Vec<CompiledExpr>,
}

impl CompiledVectorField {
    pub fn new(vf: &VectorFieldExpr, basis: &IrrationalBasis) -> Result<Self, EvalError> {
        let m = vf.dim();
        let comps = vf
            .components()
            .iter()
            .map(|e| e.compile(basis))
            .collect::<Result<Vec<_>, _>>()?;
        let mut jac = Vec::with_capacity(m * m);
        for a in 0..m {
            for b in 0..m {
                jac.push(simplify(&diff_expr(vf.component(a), b)).compile(basis)?);
            }
        }
        Ok(CompiledVectorField {
            dim: m,
            comps,
            jac,
        })
    }

    /// Compiles a Hamiltonian solve result. Pointwise fields keep their
    /// per-point linear solve and fall back to the finite-difference
    /// Jacobian.
    pub fn from_hamiltonian(
        field: &HamiltonianField,
        basis: &IrrationalBasis,
    ) -> Result<CompiledFlowField, EvalError> {
        match field {
            HamiltonianField::Symbolic(vf) => {
                Ok(CompiledFlowField::Symbolic(CompiledVectorField::new(vf, basis)?))
            }
            HamiltonianField::Pointwise(p) => Ok(CompiledFlowField::Pointwise {
                field: p.clone(),
                basis: basis.clone(),
            }),
        }
    }
}

impl FlowField for CompiledVectorField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_into(&self, x: &[f64], dx: &mut [f64]) {
        for (out, c) in dx.iter_mut().zip(&self.comps) {
            *out = c.eval(x);
        }
    }

    fn jacobian_into(&self, x: &[f64], jac: &mut [f64]) {
        for (out, c) in jac.iter_mut().zip(&self.jac) {
            *out = c.eval(x);
        }
    }
}

/// Either a compiled symbolic field or a pointwise Hamiltonian solve.
#[derive(Clone, Debug)]
pub enum CompiledFlowField {
    Symbolic(CompiledVectorField),
    Pointwise {
        field: crate::geometry::PointwiseHamiltonianField,
        basis: IrrationalBasis,
    },
}

impl FlowField for CompiledFlowField {
    fn dim(&self) -> usize {
        match self {
            CompiledFlowField::Symbolic(f) => f.dim(),
            CompiledFlowField::Pointwise { field, .. } => field.dim(),
        }
    }

    fn eval_into(&self, x: &[f64], dx: &mut [f64]) {
        match self {
            CompiledFlowField::Symbolic(f) => f.eval_into(x, dx),
            CompiledFlowField::Pointwise { field, basis } => match field.solve_at(x, basis) {
                Ok(v) => dx.copy_from_slice(&v),
                Err(_) => dx.fill(f64::NAN),
            },
        }
    }

    fn jacobian_into(&self, x: &[f64], jac: &mut [f64]) {
        match self {
            CompiledFlowField::Symbolic(f) => f.jacobian_into(x, jac),
            other => {
                // Central-difference fallback, same as the trait default.
                let m = other.dim();
                let mut xs = x.to_vec();
                let mut fp = vec![0.0; m];
                let mut fm = vec![0.0; m];
                for b in 0..m {
                    let h = 1e-6 * (1.0 + x[b].abs());
                    xs[b] = x[b] + h;
                    other.eval_into(&xs, &mut fp);
                    xs[b] = x[b] - h;
                    other.eval_into(&xs, &mut fm);
                    xs[b] = x[b];
                    for a in 0..m {
                        jac[a * m + b] = (fp[a] - fm[a]) / (2.0 * h);
                    }
                }
            }
        }
    }
}

/// `Σ_i w_i X_i` over fields of equal dimension.
pub struct WeightedSum<'a, F: FlowField> {
    fields: &'a [F],
    weights: Vec<f64>,
    dim: usize,
}

impl<'a, F: FlowField> WeightedSum<'a, F> {
    pub fn new(fields: &'a [F], weights: Vec<f64>) -> Self {
        assert_eq!(fields.len(), weights.len());
        assert!(!fields.is_empty());
        let dim = fields[0].dim();
        assert!(fields.iter().all(|f| f.dim() == dim));
        WeightedSum {
            fields,
            weights,
            dim,
        }
    }
}

impl<F: FlowField> FlowField for WeightedSum<'_, F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_into(&self, x: &[f64], dx: &mut [f64]) {
        dx.fill(0.0);
        let mut tmp = vec![0.0; self.dim];
        for (f, &w) in self.fields.iter().zip(&self.weights) {
            if w == 0.0 {
                continue;
            }
            f.eval_into(x, &mut tmp);
            for (o, v) in dx.iter_mut().zip(&tmp) {
                *o += w * v;
            }
        }
    }

    fn jacobian_into(&self, x: &[f64], jac: &mut [f64]) {
        jac.fill(0.0);
        let mut tmp = vec![0.0; self.dim * self.dim];
        for (f, &w) in self.fields.iter().zip(&self.weights) {
            if w == 0.0 {
                continue;
            }
            f.jacobian_into(x, &mut tmp);
            for (o, v) in jac.iter_mut().zip(&tmp) {
                *o += w * v;
            }
        }
    }
}

/// Extends a base field of dimension `m` to state `[x | vec(M)]` with
/// `M ∈ R^{m×cols}` flowing by the variational equation `dM/dt = DX(x)·M`.
/// Columns are stored consecutively after the base state.
pub struct VariationalField<'a, F: FlowField + ?Sized> {
    base: &'a F,
    cols: usize,
}

impl<'a, F: FlowField + ?Sized> VariationalField<'a, F> {
    pub fn new(base: &'a F, cols: usize) -> Self {
        VariationalField { base, cols }
    }

    /// Packs `(x, M)` into the extended state, column-major after `x`.
    pub fn pack(x: &[f64], m_cols: &[Vec<f64>]) -> Vec<f64> {
        let mut s = x.to_vec();
        for c in m_cols {
            s.extend_from_slice(c);
        }
        s
    }

    pub fn unpack(state: &[f64], dim: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
        let x = state[..dim].to_vec();
        let cols = state[dim..]
            .chunks(dim)
            .map(|c| c.to_vec())
            .collect();
        (x, cols)
    }
}

impl<F: FlowField + ?Sized> FlowField for VariationalField<'_, F> {
    fn dim(&self) -> usize {
        self.base.dim() * (1 + self.cols)
    }

    fn eval_into(&self, x: &[f64], dx: &mut [f64]) {
        let m = self.base.dim();
        self.base.eval_into(&x[..m], &mut dx[..m]);
        let mut jac = vec![0.0; m * m];
        self.base.jacobian_into(&x[..m], &mut jac);
        for c in 0..self.cols {
            let col = &x[m * (1 + c)..m * (2 + c)];
            let out = &mut dx[m * (1 + c)..m * (2 + c)];
            for a in 0..m {
                let mut s = 0.0;
                for (b, cb) in col.iter().enumerate() {
                    s += jac[a * m + b] * cb;
                }
                out[a] = s;
            }
        }
    }
}

// ── Dormand–Prince 5(4) ─────────────────────────────────────────────────────

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

// 5th-order minus embedded 4th-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

// Dense-output weights.
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const SAFE: f64 = 0.9;
const BETA: f64 = 0.04;
const EXPO1: f64 = 0.2 - BETA * 0.75;
const FAC_SHRINK_MAX: f64 = 5.0; // h may shrink to h/5 per rejection
const FAC_GROW_MAX: f64 = 0.1; // h may grow to 10·h per acceptance

#[derive(Clone, Debug)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: Option<f64>,
    pub h_max: Option<f64>,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions {
            rtol: 1e-10,
            atol: 1e-12,
            h_init: None,
            h_max: None,
            max_steps: 4_000_000,
        }
    }
}

/// The dense interpolant of one accepted step, valid for
/// `t ∈ [t0, t0 + h]` (or the reversed interval when `h < 0`).
#[derive(Clone, Debug)]
pub struct DenseStep {
    pub t0: f64,
    pub h: f64,
    /// Five coefficients per component: `y0, Δy, bspl, c4, c5`.
    cont: Vec<f64>,
}

impl DenseStep {
    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }

    pub fn dim(&self) -> usize {
        self.cont.len() / 5
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let s = (t - self.t0) / self.h;
        let s1 = 1.0 - s;
        for (i, o) in out.iter_mut().enumerate() {
            let c = &self.cont[5 * i..5 * i + 5];
            *o = c[0] + s * (c[1] + s1 * (c[2] + s * (c[3] + s1 * c[4])));
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(t, &mut out);
        out
    }
}

/// Whether to continue after an accepted step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepControl {
    Continue,
    Stop,
}

#[derive(Clone, Debug)]
pub struct FlowEnd {
    pub t: f64,
    pub x: Vec<f64>,
    /// True when a callback stopped the run before reaching the endpoint.
    pub stopped: bool,
    pub steps: usize,
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Hairer's starting-step heuristic.
fn initial_step<F: FlowField + ?Sized>(
    f: &F,
    x0: &[f64],
    f0: &[f64],
    dir: f64,
    span: f64,
    opts: &OdeOptions,
) -> f64 {
    let n = x0.len() as f64;
    let sk = |y: &[f64], i: usize| opts.atol + opts.rtol * y[i].abs();
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    for i in 0..x0.len() {
        let s = sk(x0, i);
        d0 += (x0[i] / s).powi(2);
        d1 += (f0[i] / s).powi(2);
    }
    d0 = (d0 / n).sqrt();
    d1 = (d1 / n).sqrt();
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    }
    .min(span);
    let y1: Vec<f64> = x0
        .iter()
        .zip(f0)
        .map(|(y, f)| y + dir * h0 * f)
        .collect();
    let mut f1 = vec![0.0; x0.len()];
    f.eval_into(&y1, &mut f1);
    let mut d2 = 0.0;
    for i in 0..x0.len() {
        let s = sk(x0, i);
        d2 += ((f1[i] - f0[i]) / s).powi(2);
    }
    d2 = (d2 / n).sqrt() / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1).min(span)
}

/// Integrates `dx/dt = X(x)` from `(t0, x0)` to `t1`, invoking `on_step`
/// with the dense interpolant of every accepted step. The callback may stop
/// the run early (for event detection); the returned state is then the end
/// of the last accepted step.
pub fn integrate_with<F, C>(
    field: &F,
    x0: &[f64],
    t0: f64,
    t1: f64,
    opts: &OdeOptions,
    mut on_step: C,
) -> Result<FlowEnd, FlowError>
where
    F: FlowField + ?Sized,
    C: FnMut(&DenseStep, &[f64]) -> StepControl,
{
    let n = field.dim();
    assert_eq!(x0.len(), n, "state dimension mismatch");
    if t0 == t1 {
        return Ok(FlowEnd {
            t: t0,
            x: x0.to_vec(),
            stopped: false,
            steps: 0,
        });
    }
    let dir = (t1 - t0).signum();
    let span = (t1 - t0).abs();
    let h_max = opts.h_max.unwrap_or(span).abs();

    let mut t = t0;
    let mut y = x0.to_vec();
    let mut k1 = vec![0.0; n];
    field.eval_into(&y, &mut k1);
    if !all_finite(&k1) || !all_finite(&y) {
        return Err(FlowError::NonFinite { t });
    }

    let mut h = dir
        * opts
            .h_init
            .map(|h| h.abs().min(span))
            .unwrap_or_else(|| initial_step(field, &y, &k1, dir, span.min(h_max), opts));

    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    let mut ystage = vec![0.0; n];
    let mut dense = DenseStep {
        t0: t,
        h,
        cont: vec![0.0; 5 * n],
    };

    let mut facold: f64 = 1e-4;
    let mut rejected = false;
    let mut steps = 0usize;

    loop {
        if steps >= opts.max_steps {
            return Err(FlowError::MaxSteps {
                t,
                max: opts.max_steps,
            });
        }
        if h.abs() <= t.abs().max(1.0) * f64::EPSILON * 16.0 {
            return Err(FlowError::StepSizeUnderflow { t });
        }
        let mut last = false;
        if (t + 1.01 * h - t1) * dir > 0.0 {
            h = t1 - t;
            last = true;
        }
        steps += 1;

        // Stages 2..6, the order-5 combination, then the FSAL stage at y_new.
        for i in 0..n {
            ystage[i] = y[i] + h * A21 * k1[i];
        }
        field.eval_into(&ystage, &mut k2);
        for i in 0..n {
            ystage[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        field.eval_into(&ystage, &mut k3);
        for i in 0..n {
            ystage[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        field.eval_into(&ystage, &mut k4);
        for i in 0..n {
            ystage[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        field.eval_into(&ystage, &mut k5);
        for i in 0..n {
            ystage[i] = y[i]
                + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        field.eval_into(&ystage, &mut k6);
        for i in 0..n {
            ynew[i] = y[i]
                + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        field.eval_into(&ynew, &mut k7);

        let mut err = 0.0;
        for i in 0..n {
            let e = h
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sk = opts.atol + opts.rtol * y[i].abs().max(ynew[i].abs());
            err += (e / sk).powi(2);
        }
        err = (err / n as f64).sqrt();

        if !err.is_finite() || !all_finite(&ynew) {
            // Domain failure inside the step: shrink hard and retry.
            h *= 0.25;
            rejected = true;
            continue;
        }

        let fac11 = err.powf(EXPO1);
        if err <= 1.0 {
            let fac = (fac11 / facold.powf(BETA) / SAFE).clamp(FAC_GROW_MAX, FAC_SHRINK_MAX);
            let fac = if rejected { fac.max(1.0) } else { fac };
            facold = err.max(1e-4);
            // Dense coefficients before the state rotates.
            for i in 0..n {
                let ydiff = ynew[i] - y[i];
                let bspl = h * k1[i] - ydiff;
                let c = &mut dense.cont[5 * i..5 * i + 5];
                c[0] = y[i];
                c[1] = ydiff;
                c[2] = bspl;
                c[3] = ydiff - h * k7[i] - bspl;
                c[4] = h
                    * (D1 * k1[i]
                        + D3 * k3[i]
                        + D4 * k4[i]
                        + D5 * k5[i]
                        + D6 * k6[i]
                        + D7 * k7[i]);
            }
            dense.t0 = t;
            dense.h = h;
            t += h;
            std::mem::swap(&mut y, &mut ynew);
            std::mem::swap(&mut k1, &mut k7);

            if on_step(&dense, &y) == StepControl::Stop {
                return Ok(FlowEnd {
                    t,
                    x: y,
                    stopped: true,
                    steps,
                });
            }
            if last {
                return Ok(FlowEnd {
                    t,
                    x: y,
                    stopped: false,
                    steps,
                });
            }
            rejected = false;
            h = (h / fac).clamp(-h_max, h_max);
            if h == 0.0 {
                return Err(FlowError::StepSizeUnderflow { t });
            }
        } else {
            h /= (fac11 / SAFE).min(FAC_SHRINK_MAX);
            rejected = true;
        }
    }
}

/// Endpoint of the flow of `field` for time `t` from `x0`.
pub fn flow_to<F: FlowField + ?Sized>(
    field: &F,
    x0: &[f64],
    t: f64,
    opts: &OdeOptions,
) -> Result<Vec<f64>, FlowError> {
    let end = integrate_with(field, x0, 0.0, t, opts, |_, _| StepControl::Continue)?;
    Ok(end.x)
}

/// States at a sequence of times, starting from `x0` at `t = 0`, integrating
/// segment to segment so no interpolation error enters: the state at each
/// requested time is an integration endpoint.
pub fn flow_sequence<F: FlowField + ?Sized>(
    field: &F,
    x0: &[f64],
    times: &[f64],
    opts: &OdeOptions,
) -> Result<Vec<Vec<f64>>, FlowError> {
    let mut out = Vec::with_capacity(times.len());
    let mut t = 0.0;
    let mut x = x0.to_vec();
    for &target in times {
        if target != t {
            x = integrate_with(field, &x, t, target, opts, |_, _| StepControl::Continue)?.x;
            t = target;
        }
        out.push(x.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;

    fn vf(sources: &[&str], vars: &[&str]) -> VectorFieldExpr {
        let names: Vec<String> = vars.iter().map(|s| s.to_string()).collect();
        VectorFieldExpr::new(
            sources
                .iter()
                .map(|s| parse_expr(s, &names).unwrap())
                .collect(),
        )
    }

    fn compiled(sources: &[&str], vars: &[&str]) -> CompiledVectorField {
        CompiledVectorField::new(&vf(sources, vars), &IrrationalBasis::empty()).unwrap()
    }

    #[test]
    fn exponential_growth() {
        let f = compiled(&["x"], &["x"]);
        let x = flow_to(&f, &[1.0], 1.0, &OdeOptions::default()).unwrap();
        assert!((x[0] - std::f64::consts::E).abs() < 1e-9);
    }

    #[test]
    fn harmonic_oscillator_period_and_energy() {
        let f = compiled(&["-y", "x"], &["x", "y"]);
        let x0 = [1.3, -0.4];
        let e0 = x0[0] * x0[0] + x0[1] * x0[1];
        let x = flow_to(&f, &x0, 2.0 * std::f64::consts::PI, &OdeOptions::default()).unwrap();
        assert!((x[0] - x0[0]).abs() < 1e-9);
        assert!((x[1] - x0[1]).abs() < 1e-9);
        assert!((x[0] * x[0] + x[1] * x[1] - e0).abs() < 1e-9);
    }

    #[test]
    fn backward_flow_inverts_forward() {
        let f = compiled(&["p", "-sin(q)"], &["q", "p"]);
        let x0 = [0.7, 0.3];
        let opts = OdeOptions::default();
        let fwd = flow_to(&f, &x0, 3.7, &opts).unwrap();
        let back = flow_to(&f, &fwd, -3.7, &opts).unwrap();
        assert!((back[0] - x0[0]).abs() < 1e-9);
        assert!((back[1] - x0[1]).abs() < 1e-9);
    }

    #[test]
    fn dense_output_matches_direct_integration() {
        let f = compiled(&["p", "-sin(q)"], &["q", "p"]);
        let x0 = [1.2, 0.0];
        let opts = OdeOptions::default();
        let mut samples: Vec<(f64, Vec<f64>)> = Vec::new();
        integrate_with(&f, &x0, 0.0, 5.0, &opts, |dense, _| {
            let tm = dense.t0 + 0.37 * dense.h;
            samples.push((tm, dense.eval(tm)));
            StepControl::Continue
        })
        .unwrap();
        assert!(samples.len() > 3);
        for (tm, interp) in samples.iter().take(20) {
            let direct = flow_to(&f, &x0, *tm, &opts).unwrap();
            for (a, b) in interp.iter().zip(&direct) {
                assert!((a - b).abs() < 1e-9, "dense output off by {}", (a - b).abs());
            }
        }
    }

    #[test]
    fn flow_sequence_matches_pointwise() {
        let f = compiled(&["-y", "x"], &["x", "y"]);
        let x0 = [1.0, 0.0];
        let opts = OdeOptions::default();
        let times = [0.3, 0.9, 2.2, 4.8];
        let seq = flow_sequence(&f, &x0, &times, &opts).unwrap();
        for (t, s) in times.iter().zip(&seq) {
            assert!((s[0] - t.cos()).abs() < 1e-9);
            assert!((s[1] - t.sin()).abs() < 1e-9);
        }
    }

    #[test]
    fn variational_flow_rotation_monodromy() {
        let f = compiled(&["-y", "x"], &["x", "y"]);
        let var = VariationalField::new(&f, 2);
        let state = VariationalField::<CompiledVectorField>::pack(
            &[0.6, 0.1],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
        );
        let t = 1.1;
        let end = flow_to(&var, &state, t, &OdeOptions::default()).unwrap();
        let (_, cols) = VariationalField::<CompiledVectorField>::unpack(&end, 2);
        let expect = [[t.cos(), -t.sin()], [t.sin(), t.cos()]];
        for (j, col) in cols.iter().enumerate() {
            for (a, v) in col.iter().enumerate() {
                assert!((v - expect[a][j]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn weighted_sum_flows_commuting_fields() {
        let vars = ["x1", "y1", "x2", "y2"];
        let f1 = compiled(&["-y1", "x1", "0", "0"], &vars);
        let f2 = compiled(&["0", "0", "-y2", "x2"], &vars);
        let fields = vec![f1, f2];
        let sum = WeightedSum::new(&fields, vec![1.0, 0.5]);
        let x0 = [1.0, 0.0, 1.0, 0.0];
        let x = flow_to(&sum, &x0, 2.0, &OdeOptions::default()).unwrap();
        assert!((x[0] - 2.0f64.cos()).abs() < 1e-9);
        assert!((x[2] - 1.0f64.cos()).abs() < 1e-9);
    }

    #[test]
    fn exact_jacobian_matches_finite_difference() {
        let f = compiled(&["p", "-sin(q)"], &["q", "p"]);
        let x = [0.8, -0.3];
        let mut exact = vec![0.0; 4];
        f.jacobian_into(&x, &mut exact);
        struct Fd<'a>(&'a CompiledVectorField);
        impl FlowField for Fd<'_> {
            fn dim(&self) -> usize {
                self.0.dim()
            }
            fn eval_into(&self, x: &[f64], dx: &mut [f64]) {
                self.0.eval_into(x, dx)
            }
        }
        let mut approx = vec![0.0; 4];
        Fd(&f).jacobian_into(&x, &mut approx);
        for (a, b) in exact.iter().zip(&approx) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn domain_failure_reports_nonfinite() {
        // log(q) blows up as the flow pushes q through 0.
        let f = compiled(&["0 - 1", "log(q)"], &["q", "p"]);
        let err = flow_to(&f, &[0.5, 0.0], 2.0, &OdeOptions::default()).unwrap_err();
        assert!(matches!(
            err,
            FlowError::StepSizeUnderflow { .. } | FlowError::NonFinite { .. }
        ));
    }
}
