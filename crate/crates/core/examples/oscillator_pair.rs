//! End-to-end tour of the chart/action pipeline on a pair of uncoupled
//! oscillators with frequencies (1, √2): build the torus chart, read off the
//! period lattice and rotation vector, check first-integral constancy on the
//! torus, compute Mineur actions, differentiate them across a chart family,
//! and assemble the symplectic action-angle normal form.
//!
//! Run with `cargo run --example oscillator_pair`.

use liouville_core::action::{
    assemble_normal_form, check_dimension_bound, mineur_action, mineur_family_samples,
    verify_action, NormalFormMode,
};
use liouville_core::expr::{parse_expr, parse_expr_with, IrrationalBasis};
use liouville_core::geometry::{Structure, Structure2Form, VectorFieldExpr};
use liouville_core::torus::{build_chart, build_chart_family, SystemSpec, Tolerances};

fn main() {
    let vars: Vec<String> = ["x1", "y1", "x2", "y2"].iter().map(|s| s.to_string()).collect();
    let mut basis = IrrationalBasis::empty();
    basis.declare("sqrt2", "1.4142135623730951").unwrap();
    let f = |s: &str| parse_expr_with(s, &vars, &["sqrt2".into()]).unwrap();

    let x1 = VectorFieldExpr::new(vec![f("-y1"), f("x1"), f("0"), f("0")]);
    let x2 = VectorFieldExpr::new(vec![f("0"), f("0"), f("-sqrt2*y2"), f("sqrt2*x2")]);
    let omega = Structure2Form::canonical_pairs(4, &[(0, 1), (2, 3)]).unwrap();
    let spec = SystemSpec::new(
        4,
        vec![x1, x2],
        vec![f("(x1^2 + y1^2)/2"), f("sqrt2*(x2^2 + y2^2)/2")],
        basis,
    )
    .unwrap()
    .with_structure(Structure::Form(omega.clone()));

    let sys = spec.compile().unwrap();
    let tols = Tolerances::default();
    let seed = [1.0, 0.0, 0.8, 0.0];

    let chart = build_chart(&sys, &seed, &tols).unwrap();
    println!("== torus chart at {seed:?} ==");
    println!(
        "validation: max commutator {:.2e}, max X(F) residual {:.2e}",
        chart.validation.max_commutator, chart.validation.max_first_integral_residual
    );
    println!("period lattice (rows = basis cycles):{}", chart.lattice);
    let rot = chart.rotation_vector(&[1.0, 1.0]);
    println!("rotation vector of X1+X2: [{:.7}, {:.7}]", rot[0], rot[1]);
    println!("  (expected [0.1591549, 0.2250791] up to cycle order)");

    // First integrals must be constant on the torus the chart parametrizes.
    let reference = sys.eval_integrals(&seed);
    let mut drift: f64 = 0.0;
    for (_, x) in chart.sample_grid(6).unwrap() {
        for (v, r) in sys.eval_integrals(&x).iter().zip(&reference) {
            drift = drift.max((v - r).abs());
        }
    }
    println!("first-integral drift over a 6x6 angle grid: {drift:.2e}");

    // Mineur actions from the primitive α = x1 dy1 + x2 dy2 of ω.
    let alpha = vec![f("0"), f("x1"), f("0"), f("x2")];
    println!("\n== Mineur actions ==");
    for cycle in 0..2 {
        let a = mineur_action(&chart, &alpha, cycle).unwrap();
        println!(
            "cycle {cycle}: μ = {:.10}  (quadrature error {:.1e}, {} nodes)",
            a.value, a.error_estimate, a.nodes
        );
    }
    println!("  (circle areas: π·0.8² = {:.10}, π·1² = {:.10})", {
        std::f64::consts::PI * 0.64
    }, std::f64::consts::PI);

    // Differentiate the actions across a stencil of nearby tori and check
    // the defining relation of action variables against the 2-form.
    let dirs = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]];
    let family = build_chart_family(&sys, &seed, &dirs, 0.02, &tols).unwrap();
    let samples = mineur_family_samples(&family, &alpha).unwrap();
    let report = verify_action(&family, &samples, &omega, 8).unwrap();
    println!("\n== action verification ==");
    println!("dμ/dz ={}", report.dmu_dz);
    println!("max residual {:.2e}  pass: {}", report.max_residual, report.pass);

    let nf = assemble_normal_form(&family, &Structure::Form(omega), NormalFormMode::Symplectic, 3)
        .unwrap();
    println!("== symplectic normal form ==");
    println!(
        "isotropy {:.2e}, magnetic {:.2e}, frame residual {:.2e}, transverse rank {}",
        nf.isotropy,
        nf.magnetic.amax(),
        nf.residual,
        nf.transverse_rank
    );

    // --- refusal paths ---------------------------------------------------
    println!("\n== refusals ==");

    // Coupled second field: the declared frame no longer commutes.
    let g = |s: &str| parse_expr(s, &vars).unwrap();
    let bad = SystemSpec::new(
        4,
        vec![
            VectorFieldExpr::new(vec![g("-y1"), g("x1"), g("0"), g("0")]),
            VectorFieldExpr::new(vec![g("0"), g("0"), g("-y2*x1"), g("x2*x1")]),
        ],
        vec![g("(x1^2 + y1^2)/2"), g("(x2^2 + y2^2)/2")],
        IrrationalBasis::empty(),
    )
    .unwrap()
    .compile()
    .unwrap();
    match build_chart(&bad, &seed, &tols) {
        Err(e) => println!("coupled declaration: {e}"),
        Ok(_) => println!("coupled declaration: unexpectedly accepted"),
    }

    // A primitive whose differential is 2ω, not ω.
    let wrong = vec![f("0"), f("2*x1"), f("0"), f("2*x2")];
    match mineur_action(&chart, &wrong, 0) {
        Err(e) => println!("doubled primitive: {e}"),
        Ok(_) => println!("doubled primitive: unexpectedly accepted"),
    }

    // Three commuting fields cannot span isotropic tori in a rank-4 structure.
    let omega4 = Structure2Form::canonical_pairs(4, &[(0, 1), (2, 3)]).unwrap();
    match check_dimension_bound(
        3,
        &Structure::Form(omega4),
        &seed,
        &IrrationalBasis::empty(),
    ) {
        Err(e) => println!("three fields on a 4-dim phase space: {e}"),
        Ok(()) => println!("three fields on a 4-dim phase space: unexpectedly accepted"),
    }
}
