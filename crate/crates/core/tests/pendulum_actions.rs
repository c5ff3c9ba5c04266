//! Pendulum libration actions against a closed-form oracle.
//!
//! For `H = p²/2 − cos q` at energy `E ∈ (−1, 1)` with modulus
//! `k² = (E+1)/2`, the loop area and period are
//!
//! ```text
//! μ(E) = 16·[E(k) − (1−k²)·K(k)]        T(E) = 4·K(k)
//! ```
//!
//! with complete elliptic integrals evaluated by the arithmetic–geometric
//! mean. The oracle is cross-checked in-test against adaptive Simpson
//! quadrature of the smooth parametrization `sin(q/2) = k·sin ψ` before the
//! library ever enters the picture.

use liouville_core::action::{
    leafwise_action, mineur_action, mineur_family_samples, verify_action,
};
use liouville_core::expr::{parse_expr, IrrationalBasis};
use liouville_core::geometry::{Structure, Structure2Form, VectorFieldExpr};
use liouville_core::torus::{build_chart, build_chart_family, SystemSpec, Tolerances, TorusChart};

/// K(k) and E(k) by the arithmetic–geometric mean.
fn elliptic_ke(k: f64) -> (f64, f64) {
    let mut a = 1.0f64;
    let mut b = (1.0 - k * k).sqrt();
    let mut c = k;
    let mut sum = 0.5 * c * c;
    let mut pow = 0.5;
    while (a - b).abs() > 1e-16 {
        let an = 0.5 * (a + b);
        let bn = (a * b).sqrt();
        c = 0.5 * (a - b);
        a = an;
        b = bn;
        pow *= 2.0;
        sum += pow * c * c;
    }
    let big_k = std::f64::consts::FRAC_PI_2 / a;
    let big_e = big_k * (1.0 - sum);
    (big_k, big_e)
}

fn modulus(e: f64) -> f64 {
    (0.5 * (e + 1.0)).sqrt()
}

fn oracle_action(e: f64) -> f64 {
    let k = modulus(e);
    let (big_k, big_e) = elliptic_ke(k);
    16.0 * (big_e - (1.0 - k * k) * big_k)
}

fn oracle_period(e: f64) -> f64 {
    4.0 * elliptic_ke(modulus(e)).0
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fb: f64, fm: f64, eps: f64) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    if (left + right - whole).abs() <= 15.0 * eps {
        left + right + (left + right - whole) / 15.0
    } else {
        simpson(f, a, m, fa, fm, flm, eps / 2.0) + simpson(f, m, b, fm, fb, frm, eps / 2.0)
    }
}

fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    simpson(f, a, b, f(a), f(b), f(0.5 * (a + b)), 1e-13)
}

#[test]
fn oracle_is_self_consistent() {
    // ∮p dq = 16k²∫₀^{π/2} cos²ψ/√(1−k²sin²ψ) dψ and
    // T = 4∫₀^{π/2} dψ/√(1−k²sin²ψ), both smooth in ψ.
    for e in [-0.8, -0.5, -0.2] {
        let k = modulus(e);
        let area = 16.0
            * k
            * k
            * integrate(
                &|psi: f64| {
                    let s = psi.sin();
                    psi.cos().powi(2) / (1.0 - k * k * s * s).sqrt()
                },
                0.0,
                std::f64::consts::FRAC_PI_2,
            );
        let period = 4.0
            * integrate(
                &|psi: f64| {
                    let s = psi.sin();
                    1.0 / (1.0 - k * k * s * s).sqrt()
                },
                0.0,
                std::f64::consts::FRAC_PI_2,
            );
        assert!((area - oracle_action(e)).abs() <= 1e-10, "e = {e}");
        assert!((period - oracle_period(e)).abs() <= 1e-10, "e = {e}");
    }
    // Pinned magnitudes so a regression in the oracle itself is visible.
    assert!((oracle_action(-0.8) - 1.2729667688).abs() <= 1e-9);
    assert!((oracle_action(-0.5) - 3.2503910917).abs() <= 1e-9);
    assert!((oracle_action(-0.2) - 5.3260882560).abs() <= 1e-9);
    assert!((oracle_period(-0.5) - 6.7430014193).abs() <= 1e-9);
    assert!((oracle_period(-0.8) - 6.4497653949).abs() <= 1e-9);
    assert!((oracle_period(-0.2) - 7.1100774860).abs() <= 1e-9);
}

/// Momentum-first coordinates `(p, q)` with `ω = dp∧dq`: the Hamiltonian
/// field of `H = p²/2 − cos q` under the convention `X ⌟ ω = −dH` is the
/// classical flow `ṗ = −sin q`, `q̇ = p`.
fn pendulum() -> SystemSpec {
    let vars: Vec<String> = ["p", "q"].iter().map(|s| s.to_string()).collect();
    let f = |s: &str| parse_expr(s, &vars).unwrap();
    let x = VectorFieldExpr::new(vec![f("-sin(q)"), f("p")]);
    SystemSpec::new(2, vec![x], vec![f("p^2/2 - cos(q)")], IrrationalBasis::empty())
        .unwrap()
        .with_structure(Structure::Form(
            Structure2Form::canonical_pairs(2, &[(0, 1)]).unwrap(),
        ))
}

fn seed_for(e: f64) -> Vec<f64> {
    vec![(2.0 * (e + 1.0)).sqrt(), 0.0]
}

fn chart_at(e: f64) -> TorusChart {
    let sys = pendulum().compile().unwrap();
    build_chart(&sys, &seed_for(e), &Tolerances::default()).unwrap()
}

fn alpha() -> Vec<liouville_core::expr::Expr> {
    // p dq is a global primitive of dp∧dq on the phase plane, and along the
    // flow ∮p dq = ∫p² dt, so the libration contour integral is positive.
    let vars: Vec<String> = ["p", "q"].iter().map(|s| s.to_string()).collect();
    vec![
        parse_expr("0", &vars).unwrap(),
        parse_expr("p", &vars).unwrap(),
    ]
}

#[test]
fn contour_action_matches_oracle() {
    for e in [-0.8, -0.5, -0.2] {
        let chart = chart_at(e);
        let a = mineur_action(&chart, &alpha(), 0).unwrap();
        let expected = oracle_action(e);
        assert!(
            (a.value - expected).abs() <= 1e-6,
            "e = {e}: μ = {} vs {expected}",
            a.value
        );
    }
}

#[test]
fn chart_period_matches_oracle() {
    for e in [-0.8, -0.5, -0.2] {
        let chart = chart_at(e);
        let t = chart.lattice[(0, 0)].abs();
        let expected = oracle_period(e);
        assert!(
            (t - expected).abs() <= 1e-6,
            "e = {e}: T = {t} vs {expected}"
        );
    }
}

#[test]
fn action_derivative_is_the_period() {
    // dμ/dE from stencil charts at E ± p₀·h must match T(E); the same
    // derivative closes the defining relation of an action variable, so the
    // verification residual is |dμ/dE − T|·|dH| on the grid.
    let sys = pendulum().compile().unwrap();
    let e = -0.5;
    let family = build_chart_family(
        &sys,
        &seed_for(e),
        &[vec![1.0, 0.0]],
        0.01,
        &Tolerances::default(),
    )
    .unwrap();
    let samples = mineur_family_samples(&family, &alpha()).unwrap();
    let omega = Structure2Form::canonical_pairs(2, &[(0, 1)]).unwrap();
    let report = verify_action(&family, &samples, &omega, 8).unwrap();
    assert!(report.pass, "residual {}", report.max_residual);
    let dmu_de = report.dmu_dz[(0, 0)];
    assert!(
        (dmu_de - oracle_period(e)).abs() <= 1e-4,
        "dμ/dE = {dmu_de} vs {}",
        oracle_period(e)
    );
}

#[test]
fn leafwise_increments_match_oracle() {
    let sys = pendulum().compile().unwrap();
    let tols = Tolerances::default();
    let energies = [-0.8, -0.5, -0.2];
    let charts: Vec<TorusChart> = energies
        .iter()
        .map(|&e| build_chart(&sys, &seed_for(e), &tols).unwrap())
        .collect();
    let h = pendulum().integrals[0].clone();
    let actions = leafwise_action(&charts, &[h], 0, &tols).unwrap();
    // Path actions vanish at the reference leaf and grow by the oracle
    // increment; orientation of the leafwise cycle class follows the chart.
    assert!(actions.mu[0].abs() <= 1e-9);
    let base = oracle_action(energies[0]);
    let sign = actions.mu[1].signum();
    for (i, &e) in energies.iter().enumerate() {
        let expected = oracle_action(e) - base;
        assert!(
            (sign * actions.mu[i] - expected).abs() <= 1e-6,
            "e = {e}: Δμ = {} vs {expected}",
            actions.mu[i]
        );
    }
    assert!(actions.path_consistency <= 1e-6);
}
