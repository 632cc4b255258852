mod common;

use common::{cir_exact, load, one_factor, vasicek_exact};
use nalgebra::DVector;
use proptest::prelude::*;
use ramsey_core::affine_model::AffineModel;
use ramsey_core::riccati::{martingale_residual, RiccatiSolution};
use ramsey_core::yield_curves::{bond_riccati, bond_riccati_from};

fn max_rel_error(sol: &RiccatiSolution, maturity: f64, exact: impl Fn(f64) -> (f64, f64)) -> f64 {
    let mut worst: f64 = 0.0;
    for (k, &t) in sol.grid().iter().enumerate() {
        let tau = maturity - t;
        if tau <= 1e-12 {
            continue;
        }
        let (a, b) = exact(tau);
        worst = worst
            .max((sol.a_nodes()[k][0] - a).abs() / a.abs())
            .max((sol.b_nodes()[k] - b).abs() / b.abs());
    }
    worst
}

/// As `max_rel_error`, but the error of `B` is measured against the size of
/// the whole log price `|B| + |A ξ|`, which stays meaningful when `B` itself
/// is close to zero.
fn max_log_price_error(sol: &RiccatiSolution, maturity: f64, xi: f64, exact: impl Fn(f64) -> (f64, f64)) -> f64 {
    let mut worst: f64 = 0.0;
    for (k, &t) in sol.grid().iter().enumerate() {
        let tau = maturity - t;
        if tau <= 1e-12 {
            continue;
        }
        let (a, b) = exact(tau);
        worst = worst
            .max((sol.a_nodes()[k][0] - a).abs() / a.abs())
            .max((sol.b_nodes()[k] - b).abs() / (b.abs() + (a * xi).abs()));
    }
    worst
}

/// Central-difference residual of the closed forms against the ODEs they
/// are supposed to solve, `(da/dτ, db/dτ)` given as functions of `(a, τ)`.
fn closed_form_residual(
    exact: impl Fn(f64) -> (f64, f64),
    rhs: impl Fn(f64, f64) -> (f64, f64),
    maturity: f64,
) -> f64 {
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for j in 1..100 {
        let tau = maturity * j as f64 / 100.0;
        let (ap, bp) = exact(tau + h);
        let (am, bm) = exact(tau - h);
        let (a, _) = exact(tau);
        let (da, db) = rhs(a, tau);
        worst = worst
            .max(((ap - am) / (2.0 * h) - da).abs())
            .max(((bp - bm) / (2.0 * h) - db).abs());
    }
    worst
}

#[test]
fn vasicek_oracle_solves_its_ode() {
    let m = load("vasicek.json");
    let kappa = 0.5;
    let sigma2 = 1e-4;
    let a_y = m.state_price_loading()[0];
    let mq = (0.02 + sigma2 * a_y) / kappa;
    // A = −C with C' = 1 − κC; B' = −κ m' C + ½σ²C².
    let res = closed_form_residual(
        |tau| vasicek_exact(&m, tau),
        |a, _| (-(1.0 + kappa * a), kappa * mq * a + 0.5 * sigma2 * a * a),
        10.0,
    );
    assert!(res < 1e-8, "residual {res:e}");
}

#[test]
fn cir_oracle_solves_its_ode() {
    let m = load("cir.json");
    let (kappa, rho, delta) = (0.3, 0.01, 0.012);
    let kq = kappa - rho * m.state_price_loading()[0];
    // With b = −A: b' = 1 − κ_Q b − ½ρb², B' = −δ b.
    let res = closed_form_residual(
        |tau| cir_exact(&m, tau),
        |a, _| {
            let b = -a;
            (-(1.0 - kq * b - 0.5 * rho * b * b), -delta * b)
        },
        10.0,
    );
    assert!(res < 1e-8, "residual {res:e}");
}

#[test]
fn vasicek_fixture_matches_closed_form() {
    let m = load("vasicek.json");
    let sol = bond_riccati(&m, 10.0, 1e-3).unwrap();
    let err = max_rel_error(&sol, 10.0, |tau| vasicek_exact(&m, tau));
    assert!(err < 1e-8, "relative error {err:e}");
}

#[test]
fn cir_fixture_matches_closed_form() {
    let m = load("cir.json");
    let sol = bond_riccati(&m, 10.0, 1e-3).unwrap();
    let err = max_rel_error(&sol, 10.0, |tau| cir_exact(&m, tau));
    assert!(err < 1e-6, "relative error {err:e}");
}

#[test]
fn deterministic_exponent_is_linear_in_time() {
    let m = load("zero_vol.json");
    let sol = bond_riccati(&m, 10.0, 1e-2).unwrap();
    for (k, &t) in sol.grid().iter().enumerate() {
        assert_eq!(sol.a_nodes()[k].amax(), 0.0);
        assert!((sol.b_nodes()[k] + 0.02 * (10.0 - t)).abs() < 1e-14);
    }
}

#[test]
fn solution_depends_on_time_to_maturity_only() {
    let m = load("two_factor.json");
    let a = bond_riccati_from(&m, 0.0, 10.0, 1e-2).unwrap();
    let b = bond_riccati_from(&m, 5.0, 15.0, 1e-2).unwrap();
    assert_eq!(a.grid().len(), b.grid().len());
    for k in 0..a.grid().len() {
        assert!((&a.a_nodes()[k] - &b.a_nodes()[k]).amax() < 1e-13);
        assert!((a.b_nodes()[k] - b.b_nodes()[k]).abs() < 1e-13);
    }
}

#[test]
fn bond_solutions_are_martingales() {
    for name in ["vasicek.json", "cir.json", "two_factor.json"] {
        let m = load(name);
        let coarse = martingale_residual(&m, &bond_riccati(&m, 5.0, 2e-3).unwrap());
        let fine = martingale_residual(&m, &bond_riccati(&m, 5.0, 1e-3).unwrap());
        assert!(fine < 1e-7, "{name}: {fine:e}");
        // The midpoint residual is second order in the step.
        assert!((3.0..5.0).contains(&(coarse / fine)), "{name}: {coarse:e} vs {fine:e}");
    }
}

#[test]
fn interpolation_hits_nodes_and_stays_between() {
    let m = load("cir.json");
    let sol = bond_riccati(&m, 2.0, 0.1).unwrap();
    let (a, b) = sol.at(sol.grid()[7]);
    assert_eq!(a, sol.a_nodes()[7]);
    assert_eq!(b, sol.b_nodes()[7]);
    let (mid, _) = sol.at(0.5 * (sol.grid()[7] + sol.grid()[8]));
    let (lo, hi) = (sol.a_nodes()[7][0].min(sol.a_nodes()[8][0]), sol.a_nodes()[7][0].max(sol.a_nodes()[8][0]));
    assert!(lo <= mid[0] && mid[0] <= hi);
}

fn price(m: &AffineModel, maturity: f64) -> f64 {
    let sol = bond_riccati(m, maturity, 1e-3).unwrap();
    (sol.exponent(0.0, &DVector::from_element(1, m.xi0[0]))).exp()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_gaussian_models_match_closed_form(
        kappa in 0.05f64..2.0,
        mean in 0.01f64..0.08,
        sigma2 in 1e-6f64..1e-3,
        premium in -5.0f64..5.0,
        maturity in 0.5f64..20.0,
    ) {
        let m = one_factor(kappa, kappa * mean, sigma2, 0.0, 0.0, premium, mean);
        let sol = bond_riccati(&m, maturity, 1e-3).unwrap();
        let err = max_log_price_error(&sol, maturity, mean, |tau| vasicek_exact(&m, tau));
        prop_assert!(err < 1e-8, "relative error {:e}", err);
    }

    #[test]
    fn random_square_root_models_match_closed_form(
        kappa in 0.1f64..1.5,
        mean in 0.01f64..0.08,
        rho in 1e-3f64..0.05,
        premium in -3.0f64..3.0,
        maturity in 0.5f64..20.0,
    ) {
        let m = one_factor(kappa, kappa * mean, 0.0, rho, 0.0, premium, mean);
        let sol = bond_riccati(&m, maturity, 1e-3).unwrap();
        let err = max_log_price_error(&sol, maturity, mean, |tau| cir_exact(&m, tau));
        prop_assert!(err < 1e-6, "relative error {:e}", err);
    }

    #[test]
    fn prices_decrease_with_maturity_for_positive_rates(
        kappa in 0.1f64..1.5,
        mean in 0.01f64..0.08,
        rho in 1e-3f64..0.05,
    ) {
        let m = one_factor(kappa, kappa * mean, 0.0, rho, 0.0, 1.0, mean);
        let (p1, p5) = (price(&m, 1.0), price(&m, 5.0));
        prop_assert!(p5 < p1 && p1 < 1.0);
    }
}
