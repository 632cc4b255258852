mod common;

use common::load;
use nalgebra::DVector;
use proptest::prelude::*;
use ramsey_core::error::Error;
use ramsey_core::market::simulate_state_price;
use ramsey_core::mc_oracle::SimConfig;
use ramsey_core::yield_curves::{
    bond_riccati, bond_riccati_from, long_rate_classify, tail_limit, yield_curve, yield_curve_at,
    yield_dynamics_check, zero_rate, LongRateAnalyzer, LongRateClass,
};

#[test]
fn deterministic_curve_is_flat() {
    let m = load("zero_vol.json");
    let curve = yield_curve(&m, &[0.5, 1.0, 10.0, 30.0], 1e-3).unwrap();
    assert!((curve.bond_prices[2] - (-0.2f64).exp()).abs() < 1e-12);
    for (r, v) in curve.zero_rates.iter().zip(&curve.vol_norms) {
        assert!((r - 0.02).abs() < 1e-12);
        assert_eq!(*v, 0.0);
    }
}

#[test]
fn short_end_approaches_the_short_rate() {
    for name in ["vasicek.json", "cir.json", "two_factor.json"] {
        let m = load(name);
        let sol = bond_riccati(&m, 1e-3, 1e-4).unwrap();
        let r = zero_rate(&sol, 0.0, &m.xi0).unwrap();
        assert!((r - m.short_rate(&m.xi0)).abs() < 1e-5, "{name}: {r}");
    }
}

#[test]
fn zero_rate_needs_time_before_maturity() {
    let m = load("vasicek.json");
    let sol = bond_riccati(&m, 1.0, 1e-2).unwrap();
    assert!(zero_rate(&sol, 1.0, &m.xi0).is_err());
}

#[test]
fn curve_at_later_time_reuses_time_homogeneity() {
    let m = load("cir.json");
    let xi = DVector::from_element(1, 0.05);
    let later = yield_curve_at(&m, 3.0, &xi, &[4.0, 8.0], 1e-3).unwrap();
    let sol = bond_riccati_from(&m, 0.0, 5.0, 1e-3).unwrap();
    let direct = sol.exponent(0.0, &xi).exp();
    assert!((later.bond_prices[1] - direct).abs() < 1e-12);
}

#[test]
fn curve_csv_round_trips() {
    let m = load("two_factor.json");
    let curve = yield_curve(&m, &[1.0, 2.0, 5.0], 1e-3).unwrap();
    let csv = curve.to_csv();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|f| f.parse().unwrap()).collect())
        .collect();
    for (j, row) in rows.iter().enumerate() {
        assert_eq!(row[1].to_bits(), curve.bond_prices[j].to_bits());
        assert_eq!(row[2].to_bits(), curve.zero_rates[j].to_bits());
    }
}

#[test]
fn invalid_tenors_are_rejected() {
    let m = load("vasicek.json");
    assert!(yield_curve(&m, &[], 1e-3).is_err());
    assert!(yield_curve(&m, &[2.0, 1.0], 1e-3).is_err());
    assert!(yield_curve(&m, &[0.0, 1.0], 1e-3).is_err());
}

fn dynamics(name: &str, step: f64, substeps: usize) -> f64 {
    let m = load(name);
    let mut sim = SimConfig::new(40, step, 1.0, 23);
    sim.noise_substeps = substeps;
    sim.store_noise = true;
    let bundle = simulate_state_price(&m, &sim).unwrap();
    yield_dynamics_check(&m, &bundle, 1.0, 0.2).unwrap().max_discrepancy
}

#[test]
fn yield_dynamics_reconstruction_converges() {
    for name in ["cir.json", "two_factor.json"] {
        let coarse = dynamics(name, 2e-3, 2);
        let fine = dynamics(name, 1e-3, 1);
        assert!(coarse < 1e-2, "{name}: {coarse}");
        assert!((1.6..2.5).contains(&(coarse / fine)), "{name}: {coarse} vs {fine}");
    }
}

#[test]
fn yield_dynamics_needs_stored_noise() {
    let m = load("vasicek.json");
    let bundle = simulate_state_price(&m, &SimConfig::new(4, 1e-2, 1.0, 1)).unwrap();
    assert!(yield_dynamics_check(&m, &bundle, 1.0, 0.2).is_err());
}

#[test]
fn long_rate_classes() {
    let cases = [
        ("vasicek.json", LongRateClass::Flat),
        ("cir.json", LongRateClass::Flat),
        ("two_factor.json", LongRateClass::Flat),
        ("random_walk.json", LongRateClass::Infinite),
        ("nondecreasing.json", LongRateClass::NonDecreasing),
    ];
    for (name, class) in cases {
        let m = load(name);
        let report = long_rate_classify(&m, &m.xi0, 200.0, 0.01, 1e-4).unwrap();
        assert_eq!(report.class, class, "{name}: {report:?}");
        assert_eq!(report.diagnostics.len(), 16);
    }
}

#[test]
fn random_walk_first_limit_is_the_volatility() {
    // Γ = −(T − t) σ for a driftless Gaussian walk with unit rate loading.
    let m = load("random_walk.json");
    let report = long_rate_classify(&m, &m.xi0, 100.0, 0.01, 1e-4).unwrap();
    assert!((report.first_limit.0 - 0.01).abs() < 1e-9);
}

#[test]
fn disagreeing_tails_are_inconclusive() {
    let m = load("nondecreasing.json");
    match long_rate_classify(&m, &m.xi0, 200.0, 0.01, 1e-12) {
        Err(Error::Inconclusive { .. }) => {}
        other => panic!("expected an inconclusive result, got {other:?}"),
    }
}

#[test]
fn long_rate_increments_do_not_decrease() {
    let m = load("nondecreasing.json");
    let analyzer = LongRateAnalyzer::new(&m, 200.0, 0.01, 1e-4).unwrap();
    let mut sim = SimConfig::new(5, 0.01, 1.0, 2);
    sim.record_every = 20;
    let bundle = simulate_state_price(&m, &sim).unwrap();
    let l = analyzer.long_rate_increments(&bundle);
    for path in l.chunks_exact(bundle.n_records()) {
        assert_eq!(path[0], 0.0);
        assert!(path.windows(2).all(|w| w[1] - w[0] >= -1e-4));
        assert!(path[path.len() - 1] > 0.0);
    }

    let flat = load("vasicek.json");
    let analyzer = LongRateAnalyzer::new(&flat, 200.0, 0.01, 1e-4).unwrap();
    let bundle = simulate_state_price(&flat, &sim).unwrap();
    let l = analyzer.long_rate_increments(&bundle);
    assert!(l.iter().all(|v| v.abs() < 1e-4));
}

proptest! {
    #[test]
    fn tail_limit_is_exact_on_its_basis(
        limit in -1.0f64..1.0,
        c1 in -1.0f64..1.0,
        c2 in -1.0f64..1.0,
        t in 10.0f64..500.0,
    ) {
        let g = |tau: f64| limit + c1 / tau.sqrt() + c2 / tau;
        let taus = [t / 4.0, t / 2.0, t];
        let fitted = tail_limit(taus, taus.map(g));
        prop_assert!((fitted - limit).abs() < 1e-10);
    }
}
