//! Monte Carlo engine used as an independent check on the Riccati prices.
//!
//! Factors are stepped with full-truncation Euler: the eigenvariances are
//! floored at zero before the square root, the factor itself is not touched.
//! Every path draws from its own ChaCha8 stream selected by `(seed, path)`,
//! so results do not depend on the number of worker threads, and all
//! reductions over paths use a fixed pairwise order.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affine_model::AffineModel;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    EulerFullTruncation,
}

fn default_one() -> usize {
    1
}

/// Simulation settings. `noise_substeps = m` builds each Brownian increment
/// as the sum of `m` finer increments, so a run at step `h` with `m = 2`
/// sees the same Brownian path as a run at step `h/2` with `m = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_paths: usize,
    pub step: f64,
    pub horizon: f64,
    pub seed: u64,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default = "default_one")]
    pub record_every: usize,
    #[serde(default)]
    pub antithetic: bool,
    #[serde(default = "default_one")]
    pub noise_substeps: usize,
    #[serde(default)]
    pub store_noise: bool,
}

impl SimConfig {
    pub fn new(n_paths: usize, step: f64, horizon: f64, seed: u64) -> Self {
        Self {
            n_paths,
            step,
            horizon,
            seed,
            scheme: Scheme::EulerFullTruncation,
            record_every: 1,
            antithetic: false,
            noise_substeps: 1,
            store_noise: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_paths < 2 {
            return Err(Error::input("n_paths must be at least 2"));
        }
        if self.antithetic && !self.n_paths.is_multiple_of(2) {
            return Err(Error::input("antithetic sampling needs an even n_paths"));
        }
        if !(self.step > 0.0 && self.step.is_finite() && self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::input("step and horizon must be positive and finite"));
        }
        let n = (self.horizon / self.step).round();
        if n < 1.0 || (n * self.step - self.horizon).abs() > 1e-12 * self.horizon.max(1.0) {
            return Err(Error::input(format!(
                "step {} does not divide horizon {}",
                self.step, self.horizon
            )));
        }
        if self.record_every == 0 || self.noise_substeps == 0 {
            return Err(Error::input("record_every and noise_substeps must be positive"));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon / self.step).round() as usize
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps() {
            self.horizon
        } else {
            k as f64 * self.step
        }
    }

    /// Step index of time `t`, which must be a grid point.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let k = (t / self.step).round();
        if k < 0.0 || k as usize > self.n_steps() || (k * self.step - t).abs() > 1e-9 * t.max(1.0) {
            return Err(Error::input(format!("time {t} is not on the simulation grid")));
        }
        Ok(k as usize)
    }

    /// Step indices stored in a path bundle: every `record_every`-th step
    /// plus the horizon.
    pub fn recorded_steps(&self) -> Vec<usize> {
        let n = self.n_steps();
        let mut ks: Vec<usize> = (0..=n).step_by(self.record_every).collect();
        if *ks.last().unwrap() != n {
            ks.push(n);
        }
        ks
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn passed(self) -> bool {
        self == Verdict::Pass
    }
}

/// Sample mean with its standard error and normal 95% interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
    pub ci95: (f64, f64),
}

impl Estimate {
    pub fn new(mean: f64, std_error: f64, n: usize) -> Self {
        Self {
            mean,
            std_error,
            n,
            ci95: (mean - 1.96 * std_error, mean + 1.96 * std_error),
        }
    }

    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = pairwise_sum(xs) / n as f64;
        let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
        let var = if n > 1 { pairwise_sum(&dev) / (n - 1) as f64 } else { 0.0 };
        Self::new(mean, (var / n as f64).sqrt(), n)
    }

    /// Estimate from antithetic pairs `(x_{2i}, x_{2i+1})`; the error is
    /// computed from the pair averages, `n` still counts paths.
    pub fn from_antithetic(xs: &[f64]) -> Self {
        let pairs: Vec<f64> = xs.chunks_exact(2).map(|p| 0.5 * (p[0] + p[1])).collect();
        let e = Self::from_samples(&pairs);
        Self::new(e.mean, e.std_error, xs.len())
    }

    pub fn contains(&self, x: f64) -> bool {
        self.ci95.0 <= x && x <= self.ci95.1
    }

    pub fn record(&self, name: &str, seed: u64, verdict: Option<Verdict>) -> EstimateRecord {
        EstimateRecord {
            name: name.to_string(),
            mean: self.mean,
            std_error: self.std_error,
            ci95: self.ci95,
            n_paths: self.n,
            seed,
            verdict,
        }
    }
}

/// JSON form of an estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub name: String,
    pub mean: f64,
    pub std_error: f64,
    pub ci95: (f64, f64),
    pub n_paths: usize,
    pub seed: u64,
    pub verdict: Option<Verdict>,
}

/// Pairwise (cascade) summation with a fixed split order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Row-major copy of the model coefficients for allocation-free stepping.
#[derive(Clone, Debug)]
pub(crate) struct Dense {
    pub n: usize,
    drift: Vec<f64>,
    delta0: Vec<f64>,
    theta: Vec<f64>,
    lam0: Vec<f64>,
    rho: Vec<f64>,
    /// `√λ⁰` when no eigenvariance depends on the factor.
    constant_sqrt: Option<Vec<f64>>,
}

impl Dense {
    pub fn new(model: &AffineModel) -> Self {
        let n = model.dim();
        let rows = |m: &nalgebra::DMatrix<f64>| {
            let mut v = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    v.push(m[(i, j)]);
                }
            }
            v
        };
        Self {
            n,
            drift: rows(&model.drift_matrix),
            delta0: model.drift_intercept.as_slice().to_vec(),
            theta: rows(&model.vol_loading),
            lam0: model.eigen_intercepts.as_slice().to_vec(),
            rho: rows(&model.eigen_loadings),
            constant_sqrt: (model.eigen_loadings.iter().all(|&x| x == 0.0)
                && model.eigen_intercepts.iter().all(|&x| x >= 0.0))
            .then(|| model.eigen_intercepts.iter().map(|l| l.sqrt()).collect()),
        }
    }

    /// Writes `√λ⁺(ξ)` into `s` and returns the number of clipped entries.
    pub fn sqrt_eigen(&self, xi: &[f64], s: &mut [f64]) -> usize {
        if let Some(c) = &self.constant_sqrt {
            s.copy_from_slice(c);
            return 0;
        }
        let n = self.n;
        let mut clips = 0;
        for i in 0..n {
            let lam = dot(&self.rho[i * n..(i + 1) * n], xi) + self.lam0[i];
            if lam < 0.0 {
                clips += 1;
                s[i] = 0.0;
            } else {
                s[i] = lam.sqrt();
            }
        }
        clips
    }

    /// `ξ ← ξ + (ϱξ + δ⁰)Δ + Θ(s ∘ ΔW)`; `scratch` receives the old state.
    pub fn euler(&self, xi: &mut Vec<f64>, s: &[f64], dw: &[f64], dt: f64, scratch: &mut Vec<f64>) {
        let n = self.n;
        for i in 0..n {
            let drift_row = &self.drift[i * n..(i + 1) * n];
            let theta_row = &self.theta[i * n..(i + 1) * n];
            let mut drift = self.delta0[i];
            let mut shock = 0.0;
            for j in 0..n {
                drift += drift_row[j] * xi[j];
                shock += theta_row[j] * s[j] * dw[j];
            }
            scratch[i] = xi[i] + drift * dt + shock;
        }
        std::mem::swap(xi, scratch);
    }

    /// `Θᵀa`, the loading seen by each Brownian coordinate before the
    /// `√λ` scaling.
    pub fn project(&self, a: &DVector<f64>) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|j| (0..n).map(|i| self.theta[i * n + j] * a[i]).sum())
            .collect()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(v·ΔW, ‖v‖²)` for the volatility vector `v_j = proj_j s_j`.
pub(crate) fn vol_terms(proj: &[f64], s: &[f64], dw: &[f64]) -> (f64, f64) {
    let mut lin = 0.0;
    let mut sq = 0.0;
    for j in 0..proj.len() {
        let v = proj[j] * s[j];
        lin += v * dw[j];
        sq += v * v;
    }
    (lin, sq)
}

pub(crate) fn vol_cross(p: &[f64], q: &[f64], s: &[f64]) -> f64 {
    let mut acc = 0.0;
    for j in 0..p.len() {
        acc += p[j] * q[j] * s[j] * s[j];
    }
    acc
}

/// Per-path Gaussian stream.
pub(crate) struct NoiseStream {
    rng: ChaCha8Rng,
    sign: f64,
    substeps: usize,
    last_dt: f64,
    scale: f64,
}

impl NoiseStream {
    pub fn new(sim: &SimConfig, path: usize) -> Self {
        let (stream, sign) = if sim.antithetic {
            (path / 2, if path % 2 == 1 { -1.0 } else { 1.0 })
        } else {
            (path, 1.0)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
        rng.set_stream(stream as u64);
        Self {
            rng,
            sign,
            substeps: sim.noise_substeps,
            last_dt: f64::NAN,
            scale: 0.0,
        }
    }

    pub fn fill(&mut self, dt: f64, dw: &mut [f64]) {
        if dt != self.last_dt {
            self.last_dt = dt;
            self.scale = self.sign * (dt / self.substeps as f64).sqrt();
        }
        let scale = self.scale;
        if self.substeps == 1 {
            for d in dw.iter_mut() {
                let z: f64 = self.rng.sample(StandardNormal);
                *d = scale * z;
            }
            return;
        }
        dw.fill(0.0);
        for _ in 0..self.substeps {
            for d in dw.iter_mut() {
                let z: f64 = self.rng.sample(StandardNormal);
                *d += scale * z;
            }
        }
    }
}

/// State handed to the per-step callback: factor, `√λ⁺` and Brownian
/// increment at the left end of step `k`. On the final call (`k = n_steps`)
/// the increment is empty and `dt` is zero.
pub(crate) struct StepView<'a> {
    pub k: usize,
    pub dt: f64,
    pub xi: &'a [f64],
    pub s: &'a [f64],
    pub dw: &'a [f64],
}

/// Runs one path of the factor and calls `f` at every grid point. Returns
/// the number of eigenvariance clips.
pub(crate) fn drive_path<F: FnMut(&StepView)>(
    dense: &Dense,
    xi0: &[f64],
    sim: &SimConfig,
    path: usize,
    mut f: F,
) -> usize {
    let n = dense.n;
    let steps = sim.n_steps();
    let time = |k: usize| if k == steps { sim.horizon } else { k as f64 * sim.step };
    let mut noise = NoiseStream::new(sim, path);
    let mut xi = xi0.to_vec();
    let mut s = vec![0.0; n];
    let mut dw = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let mut clips = 0;
    for k in 0..steps {
        let dt = time(k + 1) - time(k);
        clips += dense.sqrt_eigen(&xi, &mut s);
        noise.fill(dt, &mut dw);
        f(&StepView { k, dt, xi: &xi, s: &s, dw: &dw });
        dense.euler(&mut xi, &s, &dw, dt, &mut scratch);
    }
    clips += dense.sqrt_eigen(&xi, &mut s);
    f(&StepView {
        k: steps,
        dt: 0.0,
        xi: &xi,
        s: &s,
        dw: &[],
    });
    clips
}

/// Maps `f` over path indices in parallel, preserving path order.
pub(crate) fn par_paths<T: Send, F: Fn(usize) -> T + Sync + Send>(n_paths: usize, f: F) -> Vec<T> {
    (0..n_paths).into_par_iter().map(f).collect()
}

/// Factor paths on the recorded grid, `[path][record][coordinate]`.
#[derive(Clone, Debug)]
pub struct FactorPaths {
    pub grid: Vec<f64>,
    pub dim: usize,
    pub n_paths: usize,
    pub values: Vec<f64>,
    /// Brownian increments `[path][step][coordinate]` when requested.
    pub noise: Option<Vec<f64>>,
    pub clip_count: usize,
}

impl FactorPaths {
    pub fn at(&self, path: usize, rec: usize) -> &[f64] {
        let stride = self.grid.len() * self.dim;
        let off = path * stride + rec * self.dim;
        &self.values[off..off + self.dim]
    }
}

pub fn simulate_factors(model: &AffineModel, sim: &SimConfig) -> Result<FactorPaths> {
    sim.validate()?;
    let dense = Dense::new(model);
    let n = dense.n;
    let recorded = sim.recorded_steps();
    let per_path = par_paths(sim.n_paths, |p| {
        let mut values = Vec::with_capacity(recorded.len() * n);
        let mut noise = Vec::new();
        let mut next = 0;
        let clips = drive_path(&dense, model.xi0.as_slice(), sim, p, |v| {
            if next < recorded.len() && recorded[next] == v.k {
                values.extend_from_slice(v.xi);
                next += 1;
            }
            if sim.store_noise {
                noise.extend_from_slice(v.dw);
            }
        });
        (values, noise, clips)
    });
    let mut values = Vec::with_capacity(sim.n_paths * recorded.len() * n);
    let mut noise = Vec::new();
    let mut clip_count = 0;
    for (v, w, c) in per_path {
        values.extend(v);
        noise.extend(w);
        clip_count += c;
    }
    Ok(FactorPaths {
        grid: recorded.iter().map(|&k| sim.time(k)).collect(),
        dim: n,
        n_paths: sim.n_paths,
        values,
        noise: sim.store_noise.then_some(noise),
        clip_count,
    })
}

fn estimate(samples: &[f64], sim: &SimConfig) -> Estimate {
    if sim.antithetic {
        Estimate::from_antithetic(samples)
    } else {
        Estimate::from_samples(samples)
    }
}

/// `E[Y_T]` at `t = 0` for each tenor, from one simulation of the state
/// price up to the largest tenor.
pub fn mc_bond_prices(model: &AffineModel, sim: &SimConfig, tenors: &[f64]) -> Result<Vec<Estimate>> {
    sim.validate()?;
    if tenors.iter().any(|&t| t <= 0.0) {
        return Err(Error::input("tenors must be positive"));
    }
    if tenors.iter().any(|&t| t > sim.horizon * (1.0 + 1e-12)) {
        return Err(Error::input("a tenor exceeds the simulation horizon"));
    }
    let idx: Vec<usize> = tenors.iter().map(|&t| sim.index_of(t)).collect::<Result<_>>()?;
    let mut marks: Vec<Vec<usize>> = vec![Vec::new(); sim.n_steps() + 1];
    for (j, &k) in idx.iter().enumerate() {
        marks[k].push(j);
    }
    let dense = Dense::new(model);
    let proj_y = dense.project(&model.state_price_loading());
    let rate = (model.rate.grad.as_slice().to_vec(), model.rate.intercept);
    let samples = par_paths(sim.n_paths, |p| {
        let mut log_y: f64 = 0.0;
        let mut out = vec![0.0; idx.len()];
        drive_path(&dense, model.xi0.as_slice(), sim, p, |v| {
            for &j in &marks[v.k] {
                out[j] = log_y.exp();
            }
            if !v.dw.is_empty() {
                let r = dot(&rate.0, v.xi) + rate.1;
                let (lin, sq) = vol_terms(&proj_y, v.s, v.dw);
                log_y += (-r - 0.5 * sq) * v.dt + lin;
            }
        });
        out
    });
    Ok((0..idx.len())
        .map(|j| {
            let xs: Vec<f64> = samples.iter().map(|s| s[j]).collect();
            estimate(&xs, sim)
        })
        .collect())
}

pub fn mc_bond_price(model: &AffineModel, sim: &SimConfig, maturity: f64) -> Result<Estimate> {
    Ok(mc_bond_prices(model, sim, &[maturity])?.remove(0))
}

/// Drift estimate for one time bucket.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketDrift {
    pub t_start: f64,
    pub t_end: f64,
    pub estimate: Estimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftTest {
    pub drift: Estimate,
    pub buckets: Vec<BucketDrift>,
    pub verdict: Verdict,
}

/// Least-squares slope through the origin of the increments `ΔM` on `Δt`,
/// path by path. The aggregate drift is the path average of these slopes
/// (paths are the independent clusters); the verdict passes iff zero lies
/// in its 95% interval. The same statistic is reported per time bucket.
///
/// `paths` is `[path][record]` on `grid`.
pub fn martingale_drift_test(grid: &[f64], paths: &[f64], n_buckets: usize) -> Result<DriftTest> {
    let m = grid.len();
    if m < 2 || !paths.len().is_multiple_of(m) || paths.len() / m < 2 {
        return Err(Error::input("martingale test needs at least two paths on a grid of two points"));
    }
    if paths.iter().any(|x| !x.is_finite()) {
        return Err(Error::input("non-finite value in candidate martingale"));
    }
    let n_paths = paths.len() / m;
    let intervals = m - 1;
    let n_buckets = n_buckets.clamp(1, intervals);
    let slope = |path: &[f64], lo: usize, hi: usize| {
        let mut num = 0.0;
        let mut den = 0.0;
        for j in lo..hi {
            let dt = grid[j + 1] - grid[j];
            num += (path[j + 1] - path[j]) * dt;
            den += dt * dt;
        }
        num / den
    };
    let over = |lo: usize, hi: usize| {
        let slopes: Vec<f64> = paths.chunks_exact(m).map(|p| slope(p, lo, hi)).collect();
        Estimate::from_samples(&slopes)
    };
    let drift = over(0, intervals);
    let buckets = (0..n_buckets)
        .map(|b| {
            let lo = b * intervals / n_buckets;
            let hi = (b + 1) * intervals / n_buckets;
            BucketDrift {
                t_start: grid[lo],
                t_end: grid[hi],
                estimate: over(lo, hi),
            }
        })
        .collect();
    debug_assert_eq!(drift.n, n_paths);
    let verdict = Verdict::from_bool(drift.contains(0.0));
    Ok(DriftTest { drift, buckets, verdict })
}

/// Monte Carlo value of the terminal power constraint next to its Riccati
/// value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerConstraintCheck {
    pub estimate: Estimate,
    pub riccati_value: f64,
    pub verdict: Verdict,
    /// Relative standard error above 10%: the integrand is heavy tailed and
    /// more paths are needed for a meaningful comparison.
    pub heavy_tail_warning: bool,
}

/// Estimates `E[S_{T_H} Y_{T_H}^{1−1/θ}]`, `S = exp∫ζ`, at `t = 0` and
/// compares it with `exp(Ã_0·ξ_0 + B_0)` from the backward solve run on the
/// simulation step.
pub fn mc_power_constraint_check(
    model: &AffineModel,
    sim: &SimConfig,
    theta: f64,
    horizon: f64,
) -> Result<PowerConstraintCheck> {
    let sol = crate::market::solve_backward_power_constraint(model, theta, horizon, sim.step)?;
    let riccati_value = crate::riccati::exp_affine_expectation(&sol.riccati, 0.0, &model.xi0);

    sim.validate()?;
    let k_end = sim.index_of(horizon)?;
    let p = 1.0 - 1.0 / theta;
    let dense = Dense::new(model);
    let proj_y = dense.project(&model.state_price_loading());
    let rate = model.rate.grad.as_slice().to_vec();
    let cons = model.consumption.grad.as_slice().to_vec();
    let samples = par_paths(sim.n_paths, |path| {
        let mut log_y = 0.0;
        let mut int_zeta = 0.0;
        let mut out = 0.0;
        drive_path(&dense, model.xi0.as_slice(), sim, path, |v| {
            if v.k == k_end {
                out = (int_zeta + p * log_y).exp();
            }
            if !v.dw.is_empty() && v.k < k_end {
                let r = dot(&rate, v.xi) + model.rate.intercept;
                let z = dot(&cons, v.xi) + model.consumption.intercept;
                let (lin, sq) = vol_terms(&proj_y, v.s, v.dw);
                log_y += (-r - 0.5 * sq) * v.dt + lin;
                int_zeta += z * v.dt;
            }
        });
        out
    });
    let estimate = estimate(&samples, sim);
    let diff = (estimate.mean - riccati_value).abs();
    let ok = if estimate.std_error == 0.0 {
        diff <= 1e-10 * riccati_value.abs().max(1.0)
    } else {
        diff < 3.0 * estimate.std_error
    };
    Ok(PowerConstraintCheck {
        heavy_tail_warning: estimate.std_error > 0.1 * estimate.mean.abs(),
        estimate,
        riccati_value,
        verdict: Verdict::from_bool(ok),
    })
}
