//! Exponential-affine functionals of the factor and their Riccati systems.
//!
//! For a loading `a` and the affine running term `δ^X(ξ) = g·ξ + c`, the
//! process `a_t·ξ_t + b_t + ∫δ^X` is the log of a local martingale iff
//!
//! ```text
//! ȧ + ϱᵀa + ½∇q(a) + g = 0
//! ḃ + a·δ⁰ + ½q⁰(a) + c = 0
//! ```
//!
//! where `q(a, ξ) = ∇q(a)·ξ + q⁰(a) = ‖ãΘs(ξ)‖²`. Solving backward from a
//! terminal `(a_T, b_T)` gives `E[exp(a_T·ξ_T + b_T + ∫_t^T δ^X) | ξ_t = ξ]
//! = exp(a_t·ξ + b_t)`.

use nalgebra::DVector;

use crate::affine_model::AffineModel;
use crate::error::{Error, Result};
use crate::format::fmt_f64;

/// Gradient and intercept of an affine running term `δ(ξ) = grad·ξ + intercept`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineDriftSpec {
    pub grad: DVector<f64>,
    pub intercept: f64,
}

impl AffineDriftSpec {
    pub fn zero(dim: usize) -> Self {
        Self {
            grad: DVector::zeros(dim),
            intercept: 0.0,
        }
    }

    pub fn eval(&self, xi: &DVector<f64>) -> f64 {
        self.grad.dot(xi) + self.intercept
    }

    pub fn is_finite(&self) -> bool {
        self.intercept.is_finite() && self.grad.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Add for AffineDriftSpec {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self {
            grad: self.grad + rhs.grad,
            intercept: self.intercept + rhs.intercept,
        }
    }
}

impl std::ops::Mul<f64> for AffineDriftSpec {
    type Output = Self;
    fn mul(self, k: f64) -> Self {
        Self {
            grad: self.grad * k,
            intercept: self.intercept * k,
        }
    }
}

/// `(∇q(a), q⁰(a))` with `∇q(a) = Σ_i (Θⁱ·a)² ρ_i` and `q⁰(a) = Σ_i (Θⁱ·a)² λ⁰_i`,
/// `Θⁱ` being column `i` of `Θ`.
pub fn quadratic_variation_coeffs(model: &AffineModel, a: &DVector<f64>) -> (DVector<f64>, f64) {
    let proj_sq = model.vol_loading.tr_mul(a).map(|c| c * c);
    let grad = model.eigen_loadings.tr_mul(&proj_sq);
    let q0 = model.eigen_intercepts.dot(&proj_sq);
    (grad, q0)
}

/// Drift `f(a, ξ)` of `a·ξ + b` compensated by half its quadratic variation:
/// gradient `ȧ + ϱᵀa + ½∇q(a)`, intercept `ḃ + a·δ⁰ + ½q⁰(a)`.
pub fn affine_drift_f(
    model: &AffineModel,
    a: &DVector<f64>,
    a_dot: &DVector<f64>,
    b_dot: f64,
) -> AffineDriftSpec {
    let (grad_q, q0) = quadratic_variation_coeffs(model, a);
    AffineDriftSpec {
        grad: a_dot + model.drift_matrix.tr_mul(a) + grad_q * 0.5,
        intercept: b_dot + a.dot(&model.drift_intercept) + 0.5 * q0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiccatiConfig {
    /// Explosion guard on `‖a‖`.
    pub max_norm: f64,
}

impl Default for RiccatiConfig {
    fn default() -> Self {
        Self { max_norm: 1e6 }
    }
}

/// Backward-solved `(A, B)` on a uniform grid `t_0 < … < t_M = T`.
///
/// `ode_a` is the raw ODE state. The published loading `a` equals
/// `ode_a − shift`; the shift is zero except for problems posed on a shifted
/// unknown (bond prices, power constraints).
#[derive(Clone, Debug)]
pub struct RiccatiSolution {
    grid: Vec<f64>,
    ode_a: Vec<DVector<f64>>,
    a: Vec<DVector<f64>>,
    b: Vec<f64>,
    shift: DVector<f64>,
    pub terminal_a: DVector<f64>,
    pub terminal_b: f64,
    pub drift: AffineDriftSpec,
}

fn rhs(model: &AffineModel, drift: &AffineDriftSpec, a: &DVector<f64>) -> (DVector<f64>, f64) {
    let zero = DVector::zeros(a.len());
    let f = affine_drift_f(model, a, &zero, 0.0);
    (-(f.grad + &drift.grad), -(f.intercept + drift.intercept))
}

fn rk4_step(
    model: &AffineModel,
    drift: &AffineDriftSpec,
    a: &DVector<f64>,
    b: f64,
    h: f64,
) -> (DVector<f64>, f64) {
    let (ka1, kb1) = rhs(model, drift, a);
    let (ka2, kb2) = rhs(model, drift, &(a + &ka1 * (0.5 * h)));
    let (ka3, kb3) = rhs(model, drift, &(a + &ka2 * (0.5 * h)));
    let (ka4, kb4) = rhs(model, drift, &(a + &ka3 * h));
    let a_next = a + (ka1 + ka2 * 2.0 + ka3 * 2.0 + ka4) * (h / 6.0);
    let b_next = b + (kb1 + 2.0 * kb2 + 2.0 * kb3 + kb4) * (h / 6.0);
    (a_next, b_next)
}

fn uniform_grid(t0: f64, t_end: f64, step: f64) -> Result<Vec<f64>> {
    if !(t0.is_finite() && t_end.is_finite() && step.is_finite()) {
        return Err(Error::input("non-finite time or step"));
    }
    if t_end <= t0 {
        return Err(Error::input(format!("empty interval [{t0}, {t_end}]")));
    }
    if step <= 0.0 || step > (t_end - t0) * (1.0 + 1e-12) {
        return Err(Error::input(format!(
            "step {step} must lie in (0, {}]",
            t_end - t0
        )));
    }
    let n = ((t_end - t0) / step - 1e-9).ceil().max(1.0) as usize;
    let h = (t_end - t0) / n as f64;
    let mut grid: Vec<f64> = (0..n).map(|k| t0 + k as f64 * h).collect();
    grid.push(t_end);
    Ok(grid)
}

/// RK4 integration of the Riccati system backward from `(terminal_a,
/// terminal_b)` at `t_end` down to `t0`. The step is shrunk so the grid is
/// uniform and hits both end points.
pub fn solve_riccati_backward(
    model: &AffineModel,
    terminal_a: &DVector<f64>,
    terminal_b: f64,
    drift: &AffineDriftSpec,
    t0: f64,
    t_end: f64,
    step: f64,
) -> Result<RiccatiSolution> {
    solve_riccati_backward_with(
        model,
        terminal_a,
        terminal_b,
        drift,
        t0,
        t_end,
        step,
        RiccatiConfig::default(),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn solve_riccati_backward_with(
    model: &AffineModel,
    terminal_a: &DVector<f64>,
    terminal_b: f64,
    drift: &AffineDriftSpec,
    t0: f64,
    t_end: f64,
    step: f64,
    config: RiccatiConfig,
) -> Result<RiccatiSolution> {
    let n = model.dim();
    if terminal_a.len() != n || drift.grad.len() != n {
        return Err(Error::input("terminal loading or drift has wrong dimension"));
    }
    if !drift.is_finite() || !terminal_b.is_finite() || terminal_a.iter().any(|x| !x.is_finite()) {
        return Err(Error::input("non-finite Riccati input"));
    }
    let grid = uniform_grid(t0, t_end, step)?;
    let m = grid.len() - 1;
    let h = grid[1] - grid[0];

    let mut ode_a = vec![DVector::zeros(n); m + 1];
    let mut b = vec![0.0; m + 1];
    ode_a[m] = terminal_a.clone();
    b[m] = terminal_b;
    for k in (0..m).rev() {
        let (a_next, b_next) = rk4_step(model, drift, &ode_a[k + 1], b[k + 1], -h);
        let norm = a_next.norm();
        if !norm.is_finite() || norm > config.max_norm || !b_next.is_finite() {
            return Err(Error::Blowup {
                t: grid[k],
                norm,
                bound: config.max_norm,
            });
        }
        ode_a[k] = a_next;
        b[k] = b_next;
    }
    Ok(RiccatiSolution {
        grid,
        a: ode_a.clone(),
        ode_a,
        b,
        shift: DVector::zeros(n),
        terminal_a: terminal_a.clone(),
        terminal_b,
        drift: drift.clone(),
    })
}

impl RiccatiSolution {
    /// Publishes `ode_a − shift` as the loading. Terminal values are shifted
    /// accordingly so `a(T)` still equals `terminal_a` exactly.
    pub(crate) fn shifted(mut self, shift: &DVector<f64>) -> Self {
        self.a = self.ode_a.iter().map(|a| a - shift).collect();
        self.terminal_a = &self.terminal_a - shift;
        self.shift = shift.clone();
        self
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn start(&self) -> f64 {
        self.grid[0]
    }

    pub fn end(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    pub fn step(&self) -> f64 {
        self.grid[1] - self.grid[0]
    }

    pub fn a_nodes(&self) -> &[DVector<f64>] {
        &self.a
    }

    pub fn b_nodes(&self) -> &[f64] {
        &self.b
    }

    pub fn shift(&self) -> &DVector<f64> {
        &self.shift
    }

    /// Loadings at an arbitrary `t` in the grid range, linearly interpolated
    /// between adjacent nodes (exact on nodes).
    pub fn at(&self, t: f64) -> (DVector<f64>, f64) {
        let (k, w) = self.locate(t);
        if w == 0.0 {
            return (self.a[k].clone(), self.b[k]);
        }
        let a = &self.a[k] * (1.0 - w) + &self.a[k + 1] * w;
        let b = self.b[k] * (1.0 - w) + self.b[k + 1] * w;
        (a, b)
    }

    fn locate(&self, t: f64) -> (usize, f64) {
        let m = self.grid.len() - 1;
        if t <= self.grid[0] {
            return (0, 0.0);
        }
        if t >= self.grid[m] {
            return (m, 0.0);
        }
        let h = self.step();
        let mut k = (((t - self.grid[0]) / h).floor() as usize).min(m - 1);
        // guard against rounding in the index estimate
        while k > 0 && self.grid[k] > t {
            k -= 1;
        }
        while k + 1 < m && self.grid[k + 1] <= t {
            k += 1;
        }
        let w = (t - self.grid[k]) / (self.grid[k + 1] - self.grid[k]);
        (k, w)
    }

    /// `a(t)·ξ + b(t)`.
    pub fn exponent(&self, t: f64, xi: &DVector<f64>) -> f64 {
        let (a, b) = self.at(t);
        a.dot(xi) + b
    }

    /// Time grid, loading components and `B` as CSV, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let n = self.terminal_a.len();
        let mut out = String::from("t");
        for i in 1..=n {
            out.push_str(&format!(",A_{i}"));
        }
        out.push_str(",B\n");
        for (k, t) in self.grid.iter().enumerate() {
            out.push_str(&fmt_f64(*t));
            for x in self.a[k].iter() {
                out.push(',');
                out.push_str(&fmt_f64(*x));
            }
            out.push(',');
            out.push_str(&fmt_f64(self.b[k]));
            out.push('\n');
        }
        out
    }
}

/// `exp(A(t)·ξ + B(t))`.
pub fn exp_affine_expectation(sol: &RiccatiSolution, t: f64, xi: &DVector<f64>) -> f64 {
    sol.exponent(t, xi).exp()
}

/// Largest absolute residual of the Riccati system on the grid, using the
/// midpoint difference quotient against the right-hand side at the averaged
/// state. Second order in the step for a smooth solution.
pub fn martingale_residual(model: &AffineModel, sol: &RiccatiSolution) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..sol.grid.len() - 1 {
        let h = sol.grid[k + 1] - sol.grid[k];
        let mid_a = (&sol.ode_a[k] + &sol.ode_a[k + 1]) * 0.5;
        let (fa, fb) = rhs(model, &sol.drift, &mid_a);
        let da = (&sol.ode_a[k + 1] - &sol.ode_a[k]) / h;
        let db = (sol.b[k + 1] - sol.b[k]) / h;
        worst = worst.max((da - fa).abs().max()).max((db - fb).abs());
    }
    worst
}

/// Integrates the same system forward from the solution's initial node with
/// the same RK4 grid, returning the reconstructed terminal `(a, b)` in the
/// solution's published (shifted) coordinates.
pub fn integrate_forward(model: &AffineModel, sol: &RiccatiSolution) -> (DVector<f64>, f64) {
    let mut a = sol.ode_a[0].clone();
    let mut b = sol.b[0];
    for k in 0..sol.grid.len() - 1 {
        let h = sol.grid[k + 1] - sol.grid[k];
        let (an, bn) = rk4_step(model, &sol.drift, &a, b, h);
        a = an;
        b = bn;
    }
    (a - &sol.shift, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine_model::{AffineLoading, AffineModelSpec};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn ou(kappa: f64, mean: f64, sigma: f64) -> AffineModel {
        AffineModel::new(AffineModelSpec {
            dim: 1,
            drift_matrix: vec![vec![-kappa]],
            drift_intercept: vec![kappa * mean],
            vol_loading: vec![vec![1.0]],
            eigen_intercepts: vec![sigma * sigma],
            eigen_loadings: vec![vec![0.0]],
            admissible_coords: vec![1],
            rate_loading: AffineLoading { a: vec![1.0], b: 0.0 },
            consumption_loading: AffineLoading::constant(1, 0.0),
            premium_loading_r: vec![0.0],
            premium_loading_perp: vec![0.0],
            portfolio_loading: vec![0.0],
            xi0: vec![mean],
        })
        .unwrap()
    }

    fn identity_two_factor() -> AffineModel {
        AffineModel::new(AffineModelSpec {
            dim: 2,
            drift_matrix: vec![vec![0.0; 2]; 2],
            drift_intercept: vec![0.0; 2],
            vol_loading: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            eigen_intercepts: vec![2.0, 3.0],
            eigen_loadings: vec![vec![0.0; 2]; 2],
            admissible_coords: vec![1, 2],
            rate_loading: AffineLoading::constant(2, 0.0),
            consumption_loading: AffineLoading::constant(2, 0.0),
            premium_loading_r: vec![0.0; 2],
            premium_loading_perp: vec![0.0; 2],
            portfolio_loading: vec![0.0; 2],
            xi0: vec![0.0; 2],
        })
        .unwrap()
    }

    #[test]
    fn quadratic_variation_simple_cases() {
        let m = identity_two_factor();
        let (g, q0) = quadratic_variation_coeffs(&m, &DVector::from_vec(vec![1.0, 1.0]));
        assert_eq!(g.as_slice(), &[0.0, 0.0]);
        assert_abs_diff_eq!(q0, 5.0);
        let (g, q0) = quadratic_variation_coeffs(&m, &DVector::zeros(2));
        assert_eq!(g.as_slice(), &[0.0, 0.0]);
        assert_eq!(q0, 0.0);
    }

    #[test]
    fn drift_f_one_factor() {
        let m = AffineModel::new(AffineModelSpec {
            dim: 1,
            drift_matrix: vec![vec![-0.5]],
            drift_intercept: vec![0.05],
            vol_loading: vec![vec![1.0]],
            eigen_intercepts: vec![0.01],
            eigen_loadings: vec![vec![0.0]],
            admissible_coords: vec![1],
            rate_loading: AffineLoading::constant(1, 0.0),
            consumption_loading: AffineLoading::constant(1, 0.0),
            premium_loading_r: vec![0.0],
            premium_loading_perp: vec![0.0],
            portfolio_loading: vec![0.0],
            xi0: vec![0.1],
        })
        .unwrap();
        let zero = DVector::zeros(1);
        let f = affine_drift_f(&m, &zero, &zero, 0.0);
        assert_eq!((f.grad[0], f.intercept), (0.0, 0.0));
        let f = affine_drift_f(&m, &DVector::from_vec(vec![1.0]), &zero, 0.0);
        assert_abs_diff_eq!(f.grad[0], -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(f.intercept, 0.055, epsilon = 1e-15);
    }

    #[test]
    fn zero_problem_stays_zero() {
        let m = ou(0.5, 0.04, 0.01);
        let sol = solve_riccati_backward(&m, &DVector::zeros(1), 0.0, &AffineDriftSpec::zero(1), 0.0, 3.0, 0.01).unwrap();
        assert!(sol.a_nodes().iter().all(|a| a[0] == 0.0));
        assert!(sol.b_nodes().iter().all(|&b| b == 0.0));
        assert_eq!(exp_affine_expectation(&sol, 1.3, &DVector::from_vec(vec![0.7])), 1.0);
        assert_eq!(martingale_residual(&m, &sol), 0.0);
    }

    #[test]
    fn terminal_identity_and_grid() {
        let m = ou(0.5, 0.04, 0.01);
        let ta = DVector::from_vec(vec![0.3]);
        let drift = AffineDriftSpec { grad: DVector::from_vec(vec![-1.0]), intercept: 0.0 };
        let sol = solve_riccati_backward(&m, &ta, 0.2, &drift, 0.0, 2.0, 0.03).unwrap();
        assert_eq!(sol.end(), 2.0);
        assert_eq!(sol.a_nodes().last().unwrap()[0], 0.3);
        assert_eq!(*sol.b_nodes().last().unwrap(), 0.2);
        let xi = DVector::from_vec(vec![0.05]);
        assert_eq!(exp_affine_expectation(&sol, 2.0, &xi), (0.3f64 * 0.05 + 0.2).exp());
        let (h, n) = (sol.step(), sol.grid().len() - 1);
        assert!((h * n as f64 - 2.0).abs() < 1e-12 && h <= 0.03);
    }

    #[test]
    fn step_larger_than_interval_is_rejected() {
        let m = ou(0.5, 0.04, 0.01);
        let r = solve_riccati_backward(&m, &DVector::zeros(1), 0.0, &AffineDriftSpec::zero(1), 0.0, 1.0, 2.0);
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn residual_detects_perturbation() {
        let m = ou(0.5, 0.04, 0.01);
        let drift = AffineDriftSpec { grad: DVector::from_vec(vec![-1.0]), intercept: 0.0 };
        let mut sol = solve_riccati_backward(&m, &DVector::zeros(1), 0.0, &drift, 0.0, 5.0, 1e-2).unwrap();
        // the midpoint residual is second order: about 3e-6 here
        let tol = 1e-5;
        assert!(martingale_residual(&m, &sol) < tol);
        sol.ode_a[100][0] += 1e-4;
        assert!(martingale_residual(&m, &sol) > tol);
    }

    #[test]
    fn explosion_is_reported() {
        // Square-root factor with a large positive exponent: the moment
        // generating function explodes in finite time.
        let m = AffineModel::new(AffineModelSpec {
            dim: 1,
            drift_matrix: vec![vec![-0.1]],
            drift_intercept: vec![0.01],
            vol_loading: vec![vec![1.0]],
            eigen_intercepts: vec![0.0],
            eigen_loadings: vec![vec![1.0]],
            admissible_coords: vec![1],
            rate_loading: AffineLoading::constant(1, 0.0),
            consumption_loading: AffineLoading::constant(1, 0.0),
            premium_loading_r: vec![0.0],
            premium_loading_perp: vec![0.0],
            portfolio_loading: vec![0.0],
            xi0: vec![0.1],
        })
        .unwrap();
        let r = solve_riccati_backward(&m, &DVector::from_vec(vec![5.0]), 0.0, &AffineDriftSpec::zero(1), 0.0, 10.0, 1e-3);
        assert!(matches!(r, Err(Error::Blowup { .. })), "{r:?}");
    }

    #[test]
    fn csv_has_header_and_rows() {
        let m = identity_two_factor();
        let sol = solve_riccati_backward(&m, &DVector::zeros(2), 0.0, &AffineDriftSpec::zero(2), 0.0, 1.0, 0.5).unwrap();
        let csv = sol.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "t,A_1,A_2,B");
        assert_eq!(lines.count(), 3);
    }

    /// Vasicek discount exponents with mean-reversion `k`, long mean `m`:
    /// `A(τ) = −(1−e^{−kτ})/k`, `B(τ) = (m − σ²/2k²)(−A − τ) − σ²A²/4k`.
    fn vasicek_oracle(k: f64, m: f64, sigma: f64, tau: f64) -> (f64, f64) {
        let c = (1.0 - (-k * tau).exp()) / k;
        let b = (m - sigma * sigma / (2.0 * k * k)) * (c - tau) - sigma * sigma * c * c / (4.0 * k);
        (-c, b)
    }

    #[test]
    fn fourth_order_convergence_on_vasicek() {
        let (k, mean, sigma) = (0.5, 0.04, 0.02);
        let m = ou(k, mean, sigma);
        let drift = AffineDriftSpec { grad: DVector::from_vec(vec![-1.0]), intercept: 0.0 };
        let (_, b_exact) = vasicek_oracle(k, mean, sigma, 10.0);
        let err = |h: f64| {
            let sol = solve_riccati_backward(&m, &DVector::zeros(1), 0.0, &drift, 0.0, 10.0, h).unwrap();
            (sol.b_nodes()[0] - b_exact).abs()
        };
        let ratio = err(0.5) / err(0.25);
        assert!((12.0..20.0).contains(&ratio), "ratio {ratio}");
    }

    proptest! {
        #[test]
        fn quadratic_variation_matches_direct_norm(
            theta in prop::collection::vec(-1.0f64..1.0, 9),
            rho in prop::collection::vec(0.0f64..1.0, 9),
            lam0 in prop::collection::vec(0.0f64..1.0, 3),
            a in prop::collection::vec(-3.0f64..3.0, 3),
            xis in prop::collection::vec(prop::collection::vec(0.0f64..2.0, 3), 10),
        ) {
            let rows = |v: &[f64]| v.chunks(3).map(|c| c.to_vec()).collect::<Vec<_>>();
            let m = AffineModel::new(AffineModelSpec {
                dim: 3,
                drift_matrix: vec![vec![0.0; 3]; 3],
                drift_intercept: vec![0.0; 3],
                vol_loading: rows(&theta),
                eigen_intercepts: lam0,
                eigen_loadings: rows(&rho),
                admissible_coords: vec![1, 2, 3],
                rate_loading: AffineLoading::constant(3, 0.0),
                consumption_loading: AffineLoading::constant(3, 0.0),
                premium_loading_r: vec![0.0; 3],
                premium_loading_perp: vec![0.0; 3],
                portfolio_loading: vec![0.0; 3],
                xi0: vec![0.0; 3],
            }).unwrap();
            let a = DVector::from_vec(a);
            let (g, q0) = quadratic_variation_coeffs(&m, &a);
            for xi in xis {
                let xi = DVector::from_vec(xi);
                let direct = m.vol_vector(&a, &xi).norm_squared();
                let q = g.dot(&xi) + q0;
                prop_assert!(q >= 0.0);
                prop_assert!((q - direct).abs() < 1e-12 * (1.0 + direct));
            }
        }

        #[test]
        fn forward_integration_returns_terminal(
            kappa in 0.1f64..2.0,
            sigma in 0.01f64..0.3,
            ta in -1.0f64..1.0,
            g in -1.0f64..1.0,
        ) {
            let m = ou(kappa, 0.03, sigma);
            let drift = AffineDriftSpec { grad: DVector::from_vec(vec![g]), intercept: 0.01 };
            let sol = solve_riccati_backward(&m, &DVector::from_vec(vec![ta]), 0.1, &drift, 0.0, 2.0, 1e-3).unwrap();
            let (a, b) = integrate_forward(&m, &sol);
            prop_assert!((a[0] - ta).abs() < 1e-10);
            prop_assert!((b - 0.1).abs() < 1e-10);
        }
    }
}
