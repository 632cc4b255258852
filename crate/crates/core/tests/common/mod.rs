#![allow(dead_code)]

use std::path::{Path, PathBuf};

use ramsey_core::affine_model::{AffineLoading, AffineModel, AffineModelSpec};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn load(name: &str) -> AffineModel {
    AffineModel::from_json_file(fixture(name)).unwrap()
}

/// One-factor model `dξ = (δ − κξ)dt + √(σ² + ρξ) dW`, `r = ξ + r₀`,
/// state-price loading `−premium`.
pub fn one_factor(kappa: f64, delta: f64, sigma2: f64, rho: f64, r0: f64, premium: f64, xi0: f64) -> AffineModel {
    AffineModel::new(AffineModelSpec {
        dim: 1,
        drift_matrix: vec![vec![-kappa]],
        drift_intercept: vec![delta],
        vol_loading: vec![vec![1.0]],
        eigen_intercepts: vec![sigma2],
        eigen_loadings: vec![vec![rho]],
        admissible_coords: vec![1],
        rate_loading: AffineLoading { a: vec![1.0], b: r0 },
        consumption_loading: AffineLoading { a: vec![0.0], b: 0.03 },
        premium_loading_r: vec![premium],
        premium_loading_perp: vec![0.0],
        portfolio_loading: vec![1.0],
        xi0: vec![xi0],
    })
    .unwrap()
}

/// Exact `(A, B)` of the Gaussian one-factor bond at time to maturity `τ`:
/// the loading solves the linear ODE `C' = 1 − κC`, `A = −C`.
pub fn vasicek_exact(m: &AffineModel, tau: f64) -> (f64, f64) {
    let kappa = -m.drift_matrix[(0, 0)];
    let sigma2 = m.eigen_intercepts[0];
    let mq = (m.drift_intercept[0] + sigma2 * m.state_price_loading()[0]) / kappa;
    let r0 = m.rate.intercept;
    let c = (1.0 - (-kappa * tau).exp()) / kappa;
    let d = (mq - sigma2 / (2.0 * kappa * kappa)) * (c - tau) - sigma2 * c * c / (4.0 * kappa) - r0 * tau;
    (-c, d)
}

/// Exact `(A, B)` of the square-root one-factor bond (`λ = ρξ`, `r = ξ`).
pub fn cir_exact(m: &AffineModel, tau: f64) -> (f64, f64) {
    let kappa = -m.drift_matrix[(0, 0)];
    let sigma2 = m.eigen_loadings[(0, 0)];
    let kq = kappa - sigma2 * m.state_price_loading()[0];
    let delta = m.drift_intercept[0];
    let gamma = (kq * kq + 2.0 * sigma2).sqrt();
    let e = (gamma * tau).exp() - 1.0;
    let den = (gamma + kq) * e + 2.0 * gamma;
    let b = 2.0 * e / den;
    let a = 2.0 * delta / sigma2 * (2.0 * gamma * ((kq + gamma) * tau / 2.0).exp() / den).ln();
    (-b, a)
}
