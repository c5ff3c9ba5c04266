//! Torus-averaging across two systems and a spread of invariant tensors:
//! every tensor preserved by the commuting frame must average to itself
//! (deviation ≤ 1e-6 in the invariant frame), non-invariant inputs must be
//! refused at the hypothesis gate, and all non-constant Fourier modes of an
//! invariant tensor's frame components must vanish.

use liouville_core::conservation::{
    conservation_check, fourier_mode_bound, torus_average, ConservationError, Hypothesis,
};
use liouville_core::expr::{fold_mul, parse_expr, parse_expr_with, Expr, IrrationalBasis};
use liouville_core::geometry::{Structure2Form, TensorField, VectorFieldExpr};
use liouville_core::torus::{build_chart, SystemSpec, Tolerances, TorusChart};

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

fn one_form_d(h: &Expr, dim: usize) -> TensorField {
    let comps: Vec<Expr> = (0..dim)
        .map(|a| liouville_core::expr::diff_expr(h, a))
        .collect();
    TensorField::from_one_form(dim, comps).unwrap()
}

fn scaled(t: &TensorField, f: &Expr) -> TensorField {
    let comps: Vec<Expr> = t
        .components()
        .iter()
        .map(|c| fold_mul(f.clone(), c.clone()))
        .collect();
    TensorField::from_components(t.dim(), t.contra(), t.cov(), comps).unwrap()
}

fn coordinate_one_forms(dim: usize) -> Vec<Vec<Expr>> {
    (0..dim)
        .map(|a| {
            (0..dim)
                .map(|b| Expr::num_int(i64::from(a == b)))
                .collect()
        })
        .collect()
}

struct Suite {
    chart: TorusChart,
    tensors: Vec<(String, TensorField)>,
    rejected: Vec<(String, TensorField)>,
}

fn oscillator_pair_suite() -> Suite {
    let vars = names(&["x1", "y1", "x2", "y2"]);
    let mut basis = IrrationalBasis::empty();
    basis.declare("sqrt2", "1.4142135623730951").unwrap();
    let f = |s: &str| parse_expr_with(s, &vars, &["sqrt2".into()]).unwrap();
    let x1 = VectorFieldExpr::new(vec![f("-y1"), f("x1"), f("0"), f("0")]);
    let x2 = VectorFieldExpr::new(vec![f("0"), f("0"), f("-sqrt2*y2"), f("sqrt2*x2")]);
    let h1 = f("(x1^2 + y1^2)/2");
    let h2 = f("sqrt2*(x2^2 + y2^2)/2");
    let spec = SystemSpec::new(4, vec![x1.clone(), x2.clone()], vec![h1.clone(), h2.clone()], basis)
        .unwrap();
    let sys = spec.compile().unwrap();
    let chart = build_chart(&sys, &[1.0, 0.0, 0.8, 0.0], &Tolerances::default()).unwrap();

    let omega = TensorField::from_two_form(
        &Structure2Form::canonical_pairs(4, &[(0, 1), (2, 3)]).unwrap(),
    );
    let coords = coordinate_one_forms(4);
    let volume = TensorField::wedge_of_one_forms(4, &coords);
    let tensors = vec![
        ("structure form".to_string(), omega),
        (
            "dH1 x dH2".to_string(),
            one_form_d(&h1, 4).tensor_product(&one_form_d(&h2, 4)),
        ),
        (
            "X1 x X2".to_string(),
            TensorField::from_vector(&x1).tensor_product(&TensorField::from_vector(&x2)),
        ),
        ("volume form".to_string(), volume),
        (
            "X1 x dH2".to_string(),
            TensorField::from_vector(&x1).tensor_product(&one_form_d(&h2, 4)),
        ),
    ];
    let rejected = vec![
        (
            "x1 dx1".to_string(),
            TensorField::from_one_form(
                4,
                vec![f("x1"), f("0"), f("0"), f("0")],
            )
            .unwrap(),
        ),
        (
            "x2 d/dx1".to_string(),
            TensorField::from_vector(&VectorFieldExpr::new(vec![
                f("x2"),
                f("0"),
                f("0"),
                f("0"),
            ])),
        ),
    ];
    Suite {
        chart,
        tensors,
        rejected,
    }
}

/// Pendulum × harmonic oscillator on `(p, q, x, y)`: a genuinely nonlinear
/// factor crossed with a linear one, sharing nothing but the torus.
fn pendulum_oscillator_suite() -> Suite {
    let vars = names(&["p", "q", "x", "y"]);
    let f = |s: &str| parse_expr(s, &vars).unwrap();
    let x1 = VectorFieldExpr::new(vec![f("-sin(q)"), f("p"), f("0"), f("0")]);
    let x2 = VectorFieldExpr::new(vec![f("0"), f("0"), f("-y"), f("x")]);
    let h1 = f("p^2/2 - cos(q)");
    let h2 = f("(x^2 + y^2)/2");
    let spec = SystemSpec::new(
        4,
        vec![x1.clone(), x2.clone()],
        vec![h1.clone(), h2.clone()],
        IrrationalBasis::empty(),
    )
    .unwrap();
    let sys = spec.compile().unwrap();
    // Pendulum factor at E = −1/2 (libration), oscillator at radius 1.
    let chart = build_chart(&sys, &[1.0, 0.0, 1.0, 0.0], &Tolerances::default()).unwrap();

    let omega = TensorField::from_two_form(
        &Structure2Form::canonical_pairs(4, &[(0, 1), (2, 3)]).unwrap(),
    );
    let coords = coordinate_one_forms(4);
    let volume = TensorField::wedge_of_one_forms(4, &coords);
    let tensors = vec![
        ("structure form".to_string(), omega.clone()),
        (
            "dH1 x dH2".to_string(),
            one_form_d(&h1, 4).tensor_product(&one_form_d(&h2, 4)),
        ),
        (
            "X1 x X2".to_string(),
            TensorField::from_vector(&x1).tensor_product(&TensorField::from_vector(&x2)),
        ),
        ("H1-weighted form".to_string(), scaled(&omega, &h1)),
        ("volume form".to_string(), volume),
        (
            "X1 x dH2".to_string(),
            TensorField::from_vector(&x1).tensor_product(&one_form_d(&h2, 4)),
        ),
    ];
    let rejected = vec![
        (
            "q dq".to_string(),
            TensorField::from_one_form(4, vec![f("0"), f("q"), f("0"), f("0")]).unwrap(),
        ),
        (
            "x d/dp".to_string(),
            TensorField::from_vector(&VectorFieldExpr::new(vec![
                f("x"),
                f("0"),
                f("0"),
                f("0"),
            ])),
        ),
    ];
    Suite {
        chart,
        tensors,
        rejected,
    }
}

fn run_suite(suite: &Suite, grid: usize) {
    for (label, g) in &suite.tensors {
        let report = conservation_check(label, g, &suite.chart, Hypothesis::AllFields, grid)
            .unwrap_or_else(|e| panic!("{label}: {e}"));
        assert!(
            report.pass,
            "{label}: deviation {} exceeds {}",
            report.averaged.deviation, report.tol
        );
    }
    for (label, g) in &suite.rejected {
        let err = conservation_check(label, g, &suite.chart, Hypothesis::AllFields, grid)
            .err()
            .unwrap_or_else(|| panic!("{label}: accepted a non-invariant tensor"));
        assert!(
            matches!(err, ConservationError::HypothesisViolated { .. }),
            "{label}: {err}"
        );
    }
}

#[test]
fn oscillator_pair_invariant_tensors_average_cleanly() {
    run_suite(&oscillator_pair_suite(), 16);
}

#[test]
fn pendulum_oscillator_invariant_tensors_average_cleanly() {
    run_suite(&pendulum_oscillator_suite(), 16);
}

#[test]
fn invariant_modes_are_constant_in_every_frequency() {
    let suite = oscillator_pair_suite();
    for (label, g) in suite.tensors.iter().take(2) {
        let avg = torus_average(g, &suite.chart, 16).unwrap();
        let modes = fourier_mode_bound(&avg);
        assert!(
            modes.max_nonzero_mode <= 1e-6,
            "{label}: mode {} at frequency {:?} of component {}",
            modes.max_nonzero_mode,
            modes.frequency,
            modes.component
        );
    }
    let suite = pendulum_oscillator_suite();
    for (label, g) in suite.tensors.iter().take(2) {
        let avg = torus_average(g, &suite.chart, 16).unwrap();
        let modes = fourier_mode_bound(&avg);
        assert!(
            modes.max_nonzero_mode <= 1e-6,
            "{label}: mode {} at frequency {:?}",
            modes.max_nonzero_mode,
            modes.frequency
        );
    }
}
