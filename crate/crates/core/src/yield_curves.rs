//! Marginal-utility zero-coupon prices `B(t,T) = E[Y_T/Y_t | F_t]`, zero
//! rates, bond volatilities, the pathwise yield decomposition and the
//! long-maturity behavior of the curve.
//!
//! `Y_T/Y_t = exp(ã^Y·(ξ_T − ξ_t) − ∫(r + f(ã^Y)))`, so the price is the
//! exponential-affine functional with terminal loading `ã^Y` and running
//! term `−r − f(ã^Y)`, shifted back by `ã^Y`.

use nalgebra::{DVector, Matrix3, Vector3};
use rayon::prelude::*;
use serde::Serialize;

use crate::affine_model::AffineModel;
use crate::error::{Error, Result};
use crate::format::{csv_row, fmt_f64};
use crate::market::PathBundle;
use crate::mc_oracle::{dot, par_paths, vol_terms, Dense};
use crate::riccati::{affine_drift_f, solve_riccati_backward, AffineDriftSpec, RiccatiSolution};

/// `(A^T, B^T)` on `[t0, T]`, with `A^T(T) = 0` and `B^T(T) = 0`.
pub fn bond_riccati_from(model: &AffineModel, t0: f64, maturity: f64, step: f64) -> Result<RiccatiSolution> {
    let n = model.dim();
    let a_y = model.state_price_loading();
    let f_y = affine_drift_f(model, &a_y, &DVector::zeros(n), 0.0);
    let drift = AffineDriftSpec {
        grad: -(&model.rate.grad + &f_y.grad),
        intercept: -(model.rate.intercept + f_y.intercept),
    };
    Ok(solve_riccati_backward(model, &a_y, 0.0, &drift, t0, maturity, step)?.shifted(&a_y))
}

/// Bond exponents on `[0, T]`.
pub fn bond_riccati(model: &AffineModel, maturity: f64, step: f64) -> Result<RiccatiSolution> {
    if maturity <= 0.0 {
        return Err(Error::input("maturity must be positive"));
    }
    bond_riccati_from(model, 0.0, maturity, step)
}

/// `exp(A^T(t)·ξ + B^T(t))`.
pub fn bond_price(sol: &RiccatiSolution, t: f64, xi: &DVector<f64>) -> f64 {
    sol.exponent(t, xi).exp()
}

/// `−ln B(t,T)/(T − t)`, for `t < T`.
pub fn zero_rate(sol: &RiccatiSolution, t: f64, xi: &DVector<f64>) -> Result<f64> {
    let tau = sol.end() - t;
    if tau <= 0.0 {
        return Err(Error::input(format!("zero rate needs t < T, got t = {t}, T = {}", sol.end())));
    }
    Ok(-sol.exponent(t, xi) / tau)
}

/// `Γ_t(T) = Ã^T_t Θ s(ξ)`.
pub fn bond_volatility(model: &AffineModel, sol: &RiccatiSolution, t: f64, xi: &DVector<f64>) -> DVector<f64> {
    model.vol_vector(&sol.at(t).0, xi)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct YieldCurve {
    pub as_of: f64,
    pub tenors: Vec<f64>,
    pub bond_prices: Vec<f64>,
    pub zero_rates: Vec<f64>,
    pub vol_norms: Vec<f64>,
    pub model_hash: String,
}

impl YieldCurve {
    /// Assembles a curve from prices; zero rates and volatilities follow.
    pub fn from_prices(as_of: f64, tenors: Vec<f64>, bond_prices: Vec<f64>, vol_norms: Vec<f64>, model_hash: String) -> Self {
        let zero_rates = tenors
            .iter()
            .zip(&bond_prices)
            .map(|(t, b)| -b.ln() / (t - as_of))
            .collect();
        Self { as_of, tenors, bond_prices, zero_rates, vol_norms, model_hash }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tenor,bond_price,zero_rate,vol_norm\n");
        for j in 0..self.tenors.len() {
            out.push_str(&csv_row([
                fmt_f64(self.tenors[j]),
                fmt_f64(self.bond_prices[j]),
                fmt_f64(self.zero_rates[j]),
                fmt_f64(self.vol_norms[j]),
            ]));
        }
        out
    }
}

fn check_tenors(tenors: &[f64], as_of: f64) -> Result<()> {
    if tenors.is_empty() {
        return Err(Error::input("no tenors given"));
    }
    if tenors.windows(2).any(|w| w[1] <= w[0]) || tenors[0] <= as_of || tenors.iter().any(|t| !t.is_finite()) {
        return Err(Error::input("tenors must be finite, increasing and after the valuation time"));
    }
    Ok(())
}

/// Curve at time `t` and state `ξ`, one Riccati solve per maturity.
pub fn yield_curve_at(model: &AffineModel, t: f64, xi: &DVector<f64>, tenors: &[f64], step: f64) -> Result<YieldCurve> {
    check_tenors(tenors, t)?;
    let sols: Vec<RiccatiSolution> = tenors
        .par_iter()
        .map(|&mat| bond_riccati_from(model, t, mat, step.min(mat - t)))
        .collect::<Result<_>>()?;
    let prices = sols.iter().map(|s| bond_price(s, t, xi)).collect();
    let vols = sols.iter().map(|s| bond_volatility(model, s, t, xi).norm()).collect();
    Ok(YieldCurve::from_prices(t, tenors.to_vec(), prices, vols, model.content_hash().to_string()))
}

/// Curve at `t = 0` and the model's initial state.
pub fn yield_curve(model: &AffineModel, tenors: &[f64], step: f64) -> Result<YieldCurve> {
    yield_curve_at(model, 0.0, &model.xi0, tenors, step)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct YieldDynamicsReport {
    pub maturity: f64,
    /// Largest `|R_rebuilt − R_direct|` over paths and checked times.
    pub max_discrepancy: f64,
    /// Times closer to maturity than this are skipped: the identity divides
    /// by `T − t`, which amplifies the discretization error.
    pub min_time_to_maturity: f64,
    pub checked_times: usize,
}

/// Rebuilds `R_t(T)` along every simulated path from
///
/// ```text
/// (T − t) R_t = T R_0 − ∫r + ½∫‖Γ‖² + ∫Γ·(ν − η^R) − ∫Γ·dW
/// ```
///
/// using the stored Brownian increments, and compares it with the direct
/// `−ln B(t,T)/(T − t)` at each grid time with `T − t ≥ min_time_to_maturity`.
pub fn yield_dynamics_check(
    model: &AffineModel,
    bundle: &PathBundle,
    maturity: f64,
    min_time_to_maturity: f64,
) -> Result<YieldDynamicsReport> {
    let sim = &bundle.sim;
    if sim.record_every != 1 || bundle.noise.is_none() {
        return Err(Error::input("yield dynamics check needs every step recorded and stored noise"));
    }
    let k_end = sim.index_of(maturity)?;
    let sol = bond_riccati(model, maturity, sim.step)?;
    if sol.grid().len() != k_end + 1 {
        return Err(Error::input("maturity grid differs from the simulation grid"));
    }
    let dense = Dense::new(model);
    let gamma_proj: Vec<Vec<f64>> = sol.a_nodes().iter().map(|a| dense.project(a)).collect();
    let y_proj = dense.project(&model.state_price_loading());
    let b_nodes = sol.b_nodes();
    let last = (0..=k_end)
        .rev()
        .find(|&k| maturity - bundle.grid[k] >= min_time_to_maturity)
        .unwrap_or(0);

    let per_path = par_paths(bundle.n_paths, |p| {
        let mut s = vec![0.0; dense.n];
        let direct = |k: usize| {
            let e = dot(sol.a_nodes()[k].as_slice(), bundle.factor(p, k)) + b_nodes[k];
            -e / (maturity - bundle.grid[k])
        };
        let r0 = direct(0);
        let mut acc = maturity * r0;
        let mut worst: f64 = 0.0;
        for k in 0..last {
            let xi = bundle.factor(p, k);
            dense.sqrt_eigen(xi, &mut s);
            let dw = bundle.increment(p, k).unwrap();
            let dt = bundle.grid[k + 1] - bundle.grid[k];
            let (g_dw, g_sq) = vol_terms(&gamma_proj[k], &s, dw);
            let g_v = crate::mc_oracle::vol_cross(&gamma_proj[k], &y_proj, &s);
            acc += (0.5 * g_sq + g_v) * dt - g_dw;
            let rebuilt = (acc - bundle.int_rate(p, k + 1)) / (maturity - bundle.grid[k + 1]);
            worst = worst.max((rebuilt - direct(k + 1)).abs());
        }
        worst
    });
    Ok(YieldDynamicsReport {
        maturity,
        max_discrepancy: per_path.into_iter().fold(0.0, f64::max),
        min_time_to_maturity,
        checked_times: last + 1,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LongRateClass {
    /// `‖Γ_t(T)‖/(T − t)` has a nonzero limit.
    Infinite,
    /// First limit zero, `‖Γ_t(T)‖²/(T − t)` has a nonzero limit.
    NonDecreasing,
    /// Both limits vanish.
    Flat,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LongRateReport {
    pub class: LongRateClass,
    /// Extrapolated `lim ‖Γ‖/(T − t)` from the two tail triples.
    pub first_limit: (f64, f64),
    /// Extrapolated `lim ‖Γ‖²/(T − t)` from the two tail triples.
    pub second_limit: (f64, f64),
    pub tolerance: f64,
    /// `(T − t, ‖Γ‖/(T − t), ‖Γ‖²/(T − t))` on the diagnostic grid.
    pub diagnostics: Vec<(f64, f64, f64)>,
}

/// Limit of `g(τ) = L + c₁τ^{−1/2} + c₂τ^{−1}` fitted through three points.
/// The `τ^{−1/2}` term captures quantities decaying like `√(c/τ)`.
pub fn tail_limit(taus: [f64; 3], values: [f64; 3]) -> f64 {
    let m = Matrix3::from_fn(|i, j| match j {
        0 => 1.0,
        1 => taus[i].powf(-0.5),
        _ => 1.0 / taus[i],
    });
    let v = Vector3::from(values);
    match m.lu().solve(&v) {
        Some(c) => c[0],
        None => f64::NAN,
    }
}

/// Long-maturity analysis for a fixed model. The model is time homogeneous,
/// so `A^T(t)` depends on `T − t` only and one bond solve on `[0, T_max]`
/// serves every state and time.
#[derive(Clone, Debug)]
pub struct LongRateAnalyzer {
    model: AffineModel,
    solution: RiccatiSolution,
    t_max: f64,
    tolerance: f64,
}

impl LongRateAnalyzer {
    pub fn new(model: &AffineModel, t_max: f64, step: f64, tolerance: f64) -> Result<Self> {
        if !(t_max > 0.0 && tolerance > 0.0) {
            return Err(Error::input("t_max and tolerance must be positive"));
        }
        Ok(Self {
            model: model.clone(),
            solution: bond_riccati(model, t_max, step)?,
            t_max,
            tolerance,
        })
    }

    /// `(‖Γ‖/τ, ‖Γ‖²/τ)` at time to maturity `τ` and state `ξ`.
    pub fn ratios(&self, tau: f64, xi: &DVector<f64>) -> (f64, f64) {
        let a = self.solution.at(self.t_max - tau).0;
        let g = self.model.vol_vector(&a, xi).norm();
        (g / tau, g * g / tau)
    }

    fn limits(&self, xi: &DVector<f64>) -> ((f64, f64), (f64, f64)) {
        let t = self.t_max;
        let fit = |taus: [f64; 3]| {
            let r: Vec<(f64, f64)> = taus.iter().map(|&tau| self.ratios(tau, xi)).collect();
            (
                tail_limit(taus, [r[0].0, r[1].0, r[2].0]),
                tail_limit(taus, [r[0].1, r[1].1, r[2].1]),
            )
        };
        let main = fit([t / 4.0, t / 2.0, t]);
        let check = fit([t / 8.0, t / 4.0, t / 2.0]);
        ((main.0, check.0), (main.1, check.1))
    }

    /// `lim ‖Γ‖²/(T − t)` at state `ξ` (main tail triple).
    pub fn second_limit(&self, xi: &DVector<f64>) -> f64 {
        self.limits(xi).1 .0
    }

    pub fn classify(&self, xi: &DVector<f64>) -> Result<LongRateReport> {
        let (first, second) = self.limits(xi);
        let tol = self.tolerance;
        let agree = |pair: (f64, f64)| -> Result<()> {
            if pair.0.is_finite() && pair.1.is_finite() && (pair.0 - pair.1).abs() <= tol {
                Ok(())
            } else {
                Err(Error::Inconclusive { first: pair.0, second: pair.1, tolerance: tol })
            }
        };
        let class = if first.0.abs() > tol && first.1.abs() > tol {
            agree(first)?;
            LongRateClass::Infinite
        } else {
            agree(first)?;
            agree(second)?;
            if second.0 > tol {
                LongRateClass::NonDecreasing
            } else {
                LongRateClass::Flat
            }
        };
        let diagnostics = (1..=16)
            .map(|j| {
                let tau = self.t_max * j as f64 / 16.0;
                let (g1, g2) = self.ratios(tau, xi);
                (tau, g1, g2)
            })
            .collect();
        Ok(LongRateReport {
            class,
            first_limit: first,
            second_limit: second,
            tolerance: tol,
            diagnostics,
        })
    }

    /// `l_t − l_0 = ∫₀ᵗ ½ lim ‖Γ_s‖²/(T − s) ds` along every path of the
    /// bundle (left-point rule on the recorded grid), `[path][record]`.
    /// Only increments are returned: `l_0` itself may be infinite.
    pub fn long_rate_increments(&self, bundle: &PathBundle) -> Vec<f64> {
        let m = bundle.n_records();
        let mut out = Vec::with_capacity(bundle.n_paths * m);
        for p in 0..bundle.n_paths {
            let mut l = 0.0;
            out.push(l);
            for r in 0..m - 1 {
                let xi = DVector::from_column_slice(bundle.factor(p, r));
                l += 0.5 * self.second_limit(&xi) * (bundle.grid[r + 1] - bundle.grid[r]);
                out.push(l);
            }
        }
        out
    }
}

/// Classification at state `ξ` with a bond solve up to `t_max`.
pub fn long_rate_classify(model: &AffineModel, xi: &DVector<f64>, t_max: f64, step: f64, tolerance: f64) -> Result<LongRateReport> {
    LongRateAnalyzer::new(model, t_max, step, tolerance)?.classify(xi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine_model::{AffineLoading, AffineModelSpec};

    fn vasicek(kappa: f64, sigma: f64) -> AffineModel {
        AffineModel::new(AffineModelSpec {
            dim: 1,
            drift_matrix: vec![vec![-kappa]],
            drift_intercept: vec![kappa * 0.03],
            vol_loading: vec![vec![1.0]],
            eigen_intercepts: vec![sigma * sigma],
            eigen_loadings: vec![vec![0.0]],
            admissible_coords: vec![1],
            rate_loading: AffineLoading { a: vec![1.0], b: 0.0 },
            consumption_loading: AffineLoading::constant(1, 0.0),
            premium_loading_r: vec![0.0],
            premium_loading_perp: vec![0.0],
            portfolio_loading: vec![0.0],
            xi0: vec![0.03],
        })
        .unwrap()
    }

    #[test]
    fn bond_at_maturity_is_one() {
        let m = vasicek(0.5, 0.01);
        let sol = bond_riccati(&m, 4.0, 0.01).unwrap();
        assert_eq!(bond_price(&sol, 4.0, &DVector::from_vec(vec![0.2])), 1.0);
        assert_eq!(bond_volatility(&m, &sol, 4.0, &m.xi0).norm(), 0.0);
        assert!(zero_rate(&sol, 4.0, &m.xi0).is_err());
    }

    #[test]
    fn short_maturity_rate_tends_to_short_rate() {
        let m = vasicek(0.5, 0.01);
        let xi = DVector::from_vec(vec![0.05]);
        let sol = bond_riccati(&m, 1e-3, 1e-4).unwrap();
        assert!((zero_rate(&sol, 0.0, &xi).unwrap() - 0.05).abs() < 1e-4);
    }

    #[test]
    fn vasicek_bond_volatility() {
        let (k, s) = (0.4, 0.02);
        let m = vasicek(k, s);
        let sol = bond_riccati(&m, 7.0, 1e-3).unwrap();
        let g = bond_volatility(&m, &sol, 2.0, &m.xi0);
        let exact = -(1.0 - (-k * 5.0f64).exp()) / k * s;
        assert!((g[0] - exact).abs() < 1e-10);
    }

    #[test]
    fn tail_limit_recovers_exact_form() {
        let g = |t: f64| 0.3 + 2.0 / t.sqrt() - 5.0 / t;
        let l = tail_limit([50.0, 100.0, 200.0], [g(50.0), g(100.0), g(200.0)]);
        assert!((l - 0.3).abs() < 1e-12);
    }

    #[test]
    fn curve_csv_header() {
        let m = vasicek(0.5, 0.01);
        let c = yield_curve(&m, &[1.0, 2.0], 0.01).unwrap();
        assert!(c.to_csv().starts_with("tenor,bond_price,zero_rate,vol_norm\n"));
        assert!(yield_curve(&m, &[2.0, 1.0], 0.01).is_err());
    }

    #[test]
    fn vasicek_is_flat_and_random_walk_is_infinite() {
        let m = vasicek(0.5, 0.01);
        let r = long_rate_classify(&m, &m.xi0, 200.0, 0.05, 1e-4).unwrap();
        assert_eq!(r.class, LongRateClass::Flat);
        let walk = vasicek(0.0, 0.01);
        let r = long_rate_classify(&walk, &walk.xi0, 200.0, 0.05, 1e-4).unwrap();
        assert_eq!(r.class, LongRateClass::Infinite);
        assert!((r.first_limit.0 - 0.01).abs() < 1e-6);
    }
}
