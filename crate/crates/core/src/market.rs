//! Simulated market processes: factor, state price density, optimal wealth
//! and consumption under a shared noise, and the backward power-utility
//! terminal constraint.
//!
//! Positive processes are stepped in log space:
//!
//! ```text
//! d log Y = −(r + ½‖v‖²) dt + v·dW,               v = ã^Y Θ s(ξ)
//! d log X = (r + κ·η^R − ζ − ½‖κ‖²) dt + κ·dW,    κ = ã^X Θ s(ξ), η^R = ã^{Y,R} Θ s(ξ)
//! ```
//!
//! so positivity is exact and scaling by an initial condition is a plain
//! multiplication.

use nalgebra::DVector;
use serde::Serialize;

use crate::affine_model::AffineModel;
use crate::error::{Error, Result};
use crate::format::{csv_row, fmt_f64};
use crate::mc_oracle::{dot, drive_path, par_paths, vol_cross, vol_terms, Dense, SimConfig};
use crate::riccati::{affine_drift_f, solve_riccati_backward, AffineDriftSpec, RiccatiSolution};

/// Simulated paths on the recorded grid. Per-path arrays are flattened as
/// `[path][record]` (factors: `[path][record][coordinate]`).
#[derive(Clone, Debug)]
pub struct PathBundle {
    pub sim: SimConfig,
    pub grid: Vec<f64>,
    pub dim: usize,
    pub n_paths: usize,
    pub factors: Vec<f64>,
    pub log_state_price: Vec<f64>,
    pub log_wealth: Option<Vec<f64>>,
    /// `ζ_t X_t`.
    pub consumption_rate: Option<Vec<f64>>,
    /// `∫₀ᵗ r ds`, left-point rule on the simulation grid.
    pub integrated_rate: Vec<f64>,
    /// `∫₀ᵗ ζ ds`, left-point rule on the simulation grid.
    pub integrated_consumption: Vec<f64>,
    /// Brownian increments `[path][step][coordinate]`, every step.
    pub noise: Option<Vec<f64>>,
    pub clip_count: usize,
    /// Seed the noise was drawn from; rerunning with it reproduces the
    /// bundle bit for bit.
    pub noise_seed: u64,
    /// Hash of the model the paths belong to.
    pub model_hash: String,
}

impl PathBundle {
    pub fn n_records(&self) -> usize {
        self.grid.len()
    }

    fn idx(&self, path: usize, rec: usize) -> usize {
        path * self.grid.len() + rec
    }

    pub fn factor(&self, path: usize, rec: usize) -> &[f64] {
        let off = self.idx(path, rec) * self.dim;
        &self.factors[off..off + self.dim]
    }

    pub fn log_y(&self, path: usize, rec: usize) -> f64 {
        self.log_state_price[self.idx(path, rec)]
    }

    pub fn log_x(&self, path: usize, rec: usize) -> Option<f64> {
        self.log_wealth.as_ref().map(|w| w[self.idx(path, rec)])
    }

    pub fn int_rate(&self, path: usize, rec: usize) -> f64 {
        self.integrated_rate[self.idx(path, rec)]
    }

    pub fn int_consumption(&self, path: usize, rec: usize) -> f64 {
        self.integrated_consumption[self.idx(path, rec)]
    }

    /// Brownian increment of simulation step `k`.
    pub fn increment(&self, path: usize, k: usize) -> Option<&[f64]> {
        let steps = self.sim.n_steps();
        self.noise.as_ref().map(|w| {
            let off = (path * steps + k) * self.dim;
            &w[off..off + self.dim]
        })
    }

    /// Record index of time `t`.
    pub fn record_of(&self, t: f64) -> Result<usize> {
        self.grid
            .iter()
            .position(|&g| (g - t).abs() <= 1e-9 * t.abs().max(1.0))
            .ok_or_else(|| Error::input(format!("time {t} is not a recorded grid point")))
    }

    /// `S_t X_t Y_t` with `S = exp∫ζ`, which is a martingale for the optimal
    /// pair. Flattened `[path][record]`.
    pub fn compensated_wealth_martingale(&self) -> Result<Vec<f64>> {
        let lx = self
            .log_wealth
            .as_ref()
            .ok_or_else(|| Error::input("bundle carries no wealth paths"))?;
        Ok((0..lx.len())
            .map(|i| (self.integrated_consumption[i] + lx[i] + self.log_state_price[i]).exp())
            .collect())
    }

    /// Cross-sectional means per recorded time.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("t,mean_state_price,mean_wealth,mean_consumption,mean_integrated_rate,mean_integrated_consumption");
        for i in 1..=self.dim {
            out.push_str(&format!(",mean_xi_{i}"));
        }
        out.push('\n');
        let n = self.n_paths as f64;
        for (r, t) in self.grid.iter().enumerate() {
            let mean = |f: &dyn Fn(usize) -> f64| (0..self.n_paths).map(f).sum::<f64>() / n;
            let mut fields = vec![
                fmt_f64(*t),
                fmt_f64(mean(&|p| self.log_y(p, r).exp())),
                match &self.log_wealth {
                    Some(_) => fmt_f64(mean(&|p| self.log_x(p, r).unwrap().exp())),
                    None => String::new(),
                },
                match &self.consumption_rate {
                    Some(c) => fmt_f64(mean(&|p| c[self.idx(p, r)])),
                    None => String::new(),
                },
                fmt_f64(mean(&|p| self.int_rate(p, r))),
                fmt_f64(mean(&|p| self.int_consumption(p, r))),
            ];
            for i in 0..self.dim {
                fields.push(fmt_f64(mean(&|p| self.factor(p, r)[i])));
            }
            out.push_str(&csv_row(fields));
        }
        out
    }
}

struct PathRecord {
    factors: Vec<f64>,
    log_y: Vec<f64>,
    log_x: Vec<f64>,
    cons: Vec<f64>,
    int_r: Vec<f64>,
    int_z: Vec<f64>,
    noise: Vec<f64>,
    clips: usize,
}

fn simulate(model: &AffineModel, sim: &SimConfig, wealth: bool) -> Result<PathBundle> {
    sim.validate()?;
    let dense = Dense::new(model);
    let n = dense.n;
    let recorded = sim.recorded_steps();
    let m = recorded.len();
    let proj_y = dense.project(&model.state_price_loading());
    let proj_x = dense.project(&model.portfolio);
    let proj_eta = dense.project(&model.premium_r);
    let rate = model.rate.grad.as_slice();
    let cons = model.consumption.grad.as_slice();
    let (rate_b, cons_b) = (model.rate.intercept, model.consumption.intercept);

    let records = par_paths(sim.n_paths, |p| {
        let mut rec = PathRecord {
            factors: Vec::with_capacity(m * n),
            log_y: Vec::with_capacity(m),
            log_x: Vec::with_capacity(if wealth { m } else { 0 }),
            cons: Vec::with_capacity(if wealth { m } else { 0 }),
            int_r: Vec::with_capacity(m),
            int_z: Vec::with_capacity(m),
            noise: Vec::new(),
            clips: 0,
        };
        let (mut ly, mut lx, mut ir, mut iz) = (0.0, 0.0, 0.0, 0.0);
        let mut next = 0;
        rec.clips = drive_path(&dense, model.xi0.as_slice(), sim, p, |v| {
            let r = dot(rate, v.xi) + rate_b;
            let z = dot(cons, v.xi) + cons_b;
            if next < m && recorded[next] == v.k {
                rec.factors.extend_from_slice(v.xi);
                rec.log_y.push(ly);
                rec.int_r.push(ir);
                rec.int_z.push(iz);
                if wealth {
                    rec.log_x.push(lx);
                    rec.cons.push(z * lx.exp());
                }
                next += 1;
            }
            if v.dw.is_empty() {
                return;
            }
            if sim.store_noise {
                rec.noise.extend_from_slice(v.dw);
            }
            let (lin_y, sq_y) = vol_terms(&proj_y, v.s, v.dw);
            ly += (-r - 0.5 * sq_y) * v.dt + lin_y;
            if wealth {
                let (lin_x, sq_x) = vol_terms(&proj_x, v.s, v.dw);
                let k_eta = vol_cross(&proj_x, &proj_eta, v.s);
                lx += (r + k_eta - z - 0.5 * sq_x) * v.dt + lin_x;
            }
            ir += r * v.dt;
            iz += z * v.dt;
        });
        rec
    });

    let total = sim.n_paths * m;
    let mut b = PathBundle {
        sim: sim.clone(),
        grid: recorded.iter().map(|&k| sim.time(k)).collect(),
        dim: n,
        n_paths: sim.n_paths,
        factors: Vec::with_capacity(total * n),
        log_state_price: Vec::with_capacity(total),
        log_wealth: wealth.then(|| Vec::with_capacity(total)),
        consumption_rate: wealth.then(|| Vec::with_capacity(total)),
        integrated_rate: Vec::with_capacity(total),
        integrated_consumption: Vec::with_capacity(total),
        noise: sim.store_noise.then(Vec::new),
        clip_count: 0,
        noise_seed: sim.seed,
        model_hash: model.content_hash().to_string(),
    };
    for rec in records {
        b.factors.extend(rec.factors);
        b.log_state_price.extend(rec.log_y);
        b.integrated_rate.extend(rec.int_r);
        b.integrated_consumption.extend(rec.int_z);
        if let Some(w) = b.log_wealth.as_mut() {
            w.extend(rec.log_x);
        }
        if let Some(c) = b.consumption_rate.as_mut() {
            c.extend(rec.cons);
        }
        if let Some(w) = b.noise.as_mut() {
            w.extend(rec.noise);
        }
        b.clip_count += rec.clips;
    }
    if let Some(w) = &b.log_wealth {
        assert!(w.iter().all(|x| x.is_finite()), "wealth left (0, ∞)");
    }
    Ok(b)
}

/// Factor and state price density `Y` (with `Y_0 = 1`) under one noise draw.
pub fn simulate_state_price(model: &AffineModel, sim: &SimConfig) -> Result<PathBundle> {
    simulate(model, sim, false)
}

/// Adds the optimal wealth (`X_0 = 1`) and consumption paths to a bundle.
/// The noise is replayed from the bundle's seed, so factor and state price
/// paths are unchanged.
pub fn simulate_optimal_wealth(model: &AffineModel, sim: &SimConfig, bundle: &PathBundle) -> Result<PathBundle> {
    if &bundle.sim != sim || bundle.model_hash != model.content_hash() {
        return Err(Error::input("bundle was simulated with a different model or configuration"));
    }
    let full = simulate(model, sim, true)?;
    debug_assert_eq!(full.factors, bundle.factors);
    let mut out = bundle.clone();
    out.log_wealth = full.log_wealth;
    out.consumption_rate = full.consumption_rate;
    Ok(out)
}

/// Factor, state price, wealth and consumption in a single pass.
pub fn simulate_market(model: &AffineModel, sim: &SimConfig) -> Result<PathBundle> {
    simulate(model, sim, true)
}

/// Optimal processes for initial conditions `(x, y)`, flattened
/// `[path][record]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimalTriplet {
    pub wealth: Vec<f64>,
    pub state_price: Vec<f64>,
    pub consumption: Vec<f64>,
}

/// `(x X*, y Y*, ζ x X*)`. Each path is the unit-start path times the
/// initial value, so `x = 2` doubles the `x = 1` result exactly.
pub fn power_optimal_triplet(theta: f64, x: f64, y: f64, bundle: &PathBundle) -> Result<OptimalTriplet> {
    check_theta(theta)?;
    if !(x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite()) {
        return Err(Error::input("initial wealth and state price must be positive"));
    }
    let lx = bundle
        .log_wealth
        .as_ref()
        .ok_or_else(|| Error::input("bundle carries no wealth paths"))?;
    let cons = bundle.consumption_rate.as_ref().unwrap();
    Ok(OptimalTriplet {
        wealth: lx.iter().map(|l| x * l.exp()).collect(),
        state_price: bundle.log_state_price.iter().map(|l| y * l.exp()).collect(),
        consumption: cons.iter().map(|c| x * c).collect(),
    })
}

fn check_theta(theta: f64) -> Result<()> {
    if theta > 0.0 && theta < 1.0 {
        Ok(())
    } else {
        Err(Error::input(format!("risk aversion {theta} outside (0, 1)")))
    }
}

/// Backward-solved exponents `(Ã^θ, B^θ)` of the terminal power constraint.
#[derive(Clone, Debug)]
pub struct PowerConstraintSolution {
    pub theta: f64,
    pub horizon: f64,
    pub riccati: RiccatiSolution,
}

/// Solves for `exp(Ã_t·ξ + B_t) = E[(S_T/S_t)(Y_T/Y_t)^{1−1/θ} | ξ_t = ξ]`
/// with `S = exp∫ζ`, `T = T_H`.
///
/// Writing `p = 1 − 1/θ`, `p log(Y_T/Y_t) = p ã^Y·(ξ_T − ξ_t) − p∫(r + f(ã^Y))`,
/// so the raw unknown `a = Ã + p ã^Y` has terminal value `p ã^Y` and running
/// term `ζ − p r − p f(ã^Y)`.
pub fn solve_backward_power_constraint(
    model: &AffineModel,
    theta: f64,
    horizon: f64,
    step: f64,
) -> Result<PowerConstraintSolution> {
    check_theta(theta)?;
    let p = 1.0 - 1.0 / theta;
    let n = model.dim();
    let a_y = model.state_price_loading();
    let f_y = affine_drift_f(model, &a_y, &DVector::zeros(n), 0.0);
    let drift = AffineDriftSpec {
        grad: &model.consumption.grad - &model.rate.grad * p - &f_y.grad * p,
        intercept: model.consumption.intercept - p * model.rate.intercept - p * f_y.intercept,
    };
    let terminal = &a_y * p;
    let riccati = solve_riccati_backward(model, &terminal, 0.0, &drift, 0.0, horizon, step)?.shifted(&terminal);
    Ok(PowerConstraintSolution { theta, horizon, riccati })
}

impl PowerConstraintSolution {
    /// `max_t ‖(Ã_t)^⊥ − (1/θ)(ã^Y)^⊥‖_∞` over the solver grid.
    pub fn orthogonal_identity_residual(&self, model: &AffineModel) -> f64 {
        let target = model.project_orthogonal(&model.state_price_loading()) / self.theta;
        self.riccati
            .a_nodes()
            .iter()
            .map(|a| (model.project_orthogonal(a) - &target).amax())
            .fold(0.0, f64::max)
    }
}

/// `log X^{H}_t = −(1/θ) log Y_t + Ã_t·ξ_t + B_t` on every recorded time up
/// to the horizon, flattened `[path][record]`.
pub fn propagate_backward_wealth(sol: &PowerConstraintSolution, bundle: &PathBundle) -> Result<Vec<f64>> {
    let last = bundle.record_of(sol.horizon)?;
    let mut out = Vec::with_capacity(bundle.n_paths * (last + 1));
    for p in 0..bundle.n_paths {
        for r in 0..=last {
            let xi = DVector::from_column_slice(bundle.factor(p, r));
            let e = sol.riccati.exponent(bundle.grid[r], &xi);
            out.push(-bundle.log_y(p, r) / sol.theta + e);
        }
    }
    Ok(out)
}

/// Pathwise check of the propagated constraint against a wealth process
/// built from its own dynamics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConstraintError {
    /// `sup_{path, t} |X_t Y_t^{1/θ} exp(−Ã_t·ξ_t − B_t) − 1|`.
    pub sup: f64,
    /// Same supremum at `t = T_H` only.
    pub terminal_sup: f64,
}

/// Steps `log X` with the self-financing dynamics and the portfolio
/// `κ_t = ((Ã_t − ã^Y/θ) restricted to E) Θ s(ξ_t)`, starting from
/// `X_0 = exp(Ã_0·ξ_0 + B_0)`, and measures its distance to the closed form
/// `Y^{−1/θ} exp(Ã·ξ + B)`. Needs a bundle recorded at every step with
/// stored noise, on the same step as the solution.
pub fn backward_constraint_error(
    model: &AffineModel,
    sol: &PowerConstraintSolution,
    bundle: &PathBundle,
) -> Result<ConstraintError> {
    let sim = &bundle.sim;
    if sim.record_every != 1 || bundle.noise.is_none() {
        return Err(Error::input("constraint check needs every step recorded and stored noise"));
    }
    let k_end = sim.index_of(sol.horizon)?;
    if sol.riccati.grid().len() != k_end + 1 || (sol.riccati.step() - sim.step).abs() > 1e-12 * sim.step {
        return Err(Error::input("solution grid differs from the simulation grid"));
    }
    let dense = Dense::new(model);
    let theta = sol.theta;
    let a_y = model.state_price_loading();
    let kappa_proj: Vec<Vec<f64>> = sol
        .riccati
        .a_nodes()
        .iter()
        .map(|a| dense.project(&model.project_admissible(&(a - &a_y / theta))))
        .collect();
    let eta_proj = dense.project(&model.premium_r);
    let a_nodes = sol.riccati.a_nodes();
    let b_nodes = sol.riccati.b_nodes();
    let rate = model.rate.grad.as_slice();
    let cons = model.consumption.grad.as_slice();

    let per_path = par_paths(bundle.n_paths, |p| {
        let mut s = vec![0.0; dense.n];
        let closed = |k: usize| {
            let xi = bundle.factor(p, k);
            dot(a_nodes[k].as_slice(), xi) + b_nodes[k] - bundle.log_y(p, k) / theta
        };
        let mut lx = closed(0);
        let mut worst: f64 = 0.0;
        for k in 0..k_end {
            let xi = bundle.factor(p, k);
            dense.sqrt_eigen(xi, &mut s);
            let dw = bundle.increment(p, k).unwrap();
            let dt = bundle.grid[k + 1] - bundle.grid[k];
            let r = dot(rate, xi) + model.rate.intercept;
            let z = dot(cons, xi) + model.consumption.intercept;
            let (lin, sq) = vol_terms(&kappa_proj[k], &s, dw);
            let k_eta = vol_cross(&kappa_proj[k], &eta_proj, &s);
            lx += (r + k_eta - z - 0.5 * sq) * dt + lin;
            worst = worst.max(((lx - closed(k + 1)).exp() - 1.0).abs());
        }
        (worst, ((lx - closed(k_end)).exp() - 1.0).abs())
    });
    Ok(ConstraintError {
        sup: per_path.iter().map(|w| w.0).fold(0.0, f64::max),
        terminal_sup: per_path.iter().map(|w| w.1).fold(0.0, f64::max),
    })
}
