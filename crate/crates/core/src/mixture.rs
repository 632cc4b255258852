//! Mixtures over risk aversion.
//!
//! Each node `θ_k` of a quadrature grid carries its own power-utility market
//! (same factor, θ-dependent agent loadings) and all of them are simulated
//! under one noise. Wealth and state price are aggregated with the weights
//! `x^θ(x) = f(θ/x)` and `y^θ(y) = g(θ/y)`:
//!
//! ```text
//! X̄_t(x) = Σ_k w_k x^{θ_k}(x) X^{θ_k}_t,    Ȳ_t(y) = Σ_k w_k y^{θ_k}(y) Y^{θ_k}_t
//! ```
//!
//! On a truncated range `(θ_min, θ_max)` the weights are divided by the mass
//! `m(x) = F(θ_max/x) − F(θ_min/x)` so that `∫ x^θ(x) dθ = x` still holds.

use std::num::NonZeroUsize;

use gauss_quad::GaussLegendre;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::affine_model::{AffineLoading, AffineModel};
use crate::error::{Error, Result};
use crate::format::{csv_row, fmt_f64};
use crate::market::{simulate_market, PathBundle};
use crate::mc_oracle::SimConfig;
use crate::yield_curves::{bond_price, bond_riccati_from, YieldCurve};

/// Strictly decreasing density on `(0, ∞)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Density {
    Exponential { rate: f64 },
}

impl Default for Density {
    fn default() -> Self {
        Density::Exponential { rate: 1.0 }
    }
}

impl Density {
    pub fn pdf(&self, z: f64) -> f64 {
        match *self {
            Density::Exponential { rate } => rate * (-rate * z).exp(),
        }
    }

    /// `F(b) − F(a)` for `a < b`.
    pub fn mass(&self, a: f64, b: f64) -> f64 {
        match *self {
            Density::Exponential { rate } => (-rate * a).exp() - (-rate * b).exp(),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Density::Exponential { rate } if rate > 0.0 && rate.is_finite() => Ok(()),
            _ => Err(Error::input("density rate must be positive")),
        }
    }
}

/// Deterministic utility whose marginal is composed with the aggregate flows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaseUtility {
    /// `u(x) = x^{1−θ₀}/(1−θ₀)`, `u_x(x) = x^{−θ₀}`.
    Power { theta0: f64 },
    Log,
}

impl Default for BaseUtility {
    fn default() -> Self {
        BaseUtility::Power { theta0: 0.5 }
    }
}

impl BaseUtility {
    pub fn marginal(&self, x: f64) -> f64 {
        match *self {
            BaseUtility::Power { theta0 } => x.powf(-theta0),
            BaseUtility::Log => 1.0 / x,
        }
    }
}

/// Per-node replacement of the agent loadings. `node` is 0-based.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeOverride {
    pub node: usize,
    #[serde(default)]
    pub premium_loading_perp: Option<Vec<f64>>,
    #[serde(default)]
    pub portfolio_loading: Option<Vec<f64>>,
    #[serde(default)]
    pub consumption_loading: Option<AffineLoading>,
}

fn default_exponent() -> f64 {
    1.0
}

/// How the agent loadings vary with θ:
/// `a^{X,R,θ} = a^{X,R} θ^{−portfolio_exponent}` and
/// `a^{Y,⊥,θ} = a^{Y,⊥} + θ · perp_premium_slope`, then per-node overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyConfig {
    #[serde(default = "default_exponent")]
    pub portfolio_exponent: f64,
    #[serde(default)]
    pub perp_premium_slope: Option<Vec<f64>>,
    #[serde(default)]
    pub overrides: Vec<NodeOverride>,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        Self {
            portfolio_exponent: 1.0,
            perp_premium_slope: None,
            overrides: Vec::new(),
        }
    }
}

fn default_theta_min() -> f64 {
    0.05
}
fn default_theta_max() -> f64 {
    0.95
}
fn default_nodes() -> usize {
    16
}

/// Mixture settings as read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureConfig {
    #[serde(default = "default_theta_min")]
    pub theta_min: f64,
    #[serde(default = "default_theta_max")]
    pub theta_max: f64,
    /// Gauss–Legendre order on `(theta_min, theta_max)`.
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    /// Explicit nodes, replacing the Gauss–Legendre grid.
    #[serde(default)]
    pub theta_nodes: Option<Vec<f64>>,
    #[serde(default)]
    pub quadrature_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub density_f: Density,
    #[serde(default)]
    pub density_g: Density,
    #[serde(default)]
    pub family: FamilyConfig,
    #[serde(default)]
    pub base_utility: BaseUtility,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

impl MixtureConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

/// Resolved mixture: quadrature grid, densities and one model per node.
#[derive(Clone, Debug)]
pub struct MixtureSpec {
    pub thetas: Vec<f64>,
    pub weights: Vec<f64>,
    pub theta_min: f64,
    pub theta_max: f64,
    pub density_f: Density,
    pub density_g: Density,
    pub base_utility: BaseUtility,
    pub models: Vec<AffineModel>,
}

/// Gauss–Legendre nodes and weights mapped to `(a, b)`.
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = NonZeroUsize::new(n).ok_or_else(|| Error::input("quadrature order must be positive"))?;
    let rule = GaussLegendre::new(n);
    let (half, mid) = (0.5 * (b - a), 0.5 * (b + a));
    let mut pairs: Vec<(f64, f64)> = rule.iter().map(|(x, w)| (mid + half * x, half * w)).collect();
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0));
    Ok(pairs.into_iter().unzip())
}

impl MixtureSpec {
    pub fn new(base: &AffineModel, cfg: &MixtureConfig) -> Result<Self> {
        let (lo, hi) = (cfg.theta_min, cfg.theta_max);
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::input(format!("theta range ({lo}, {hi}) must lie inside (0, 1)")));
        }
        cfg.density_f.validate()?;
        cfg.density_g.validate()?;
        let (thetas, weights) = match (&cfg.theta_nodes, &cfg.quadrature_weights) {
            (Some(t), Some(w)) => {
                if t.is_empty() || t.len() != w.len() {
                    return Err(Error::input("theta_nodes and quadrature_weights must have equal nonzero length"));
                }
                if t.windows(2).any(|p| p[1] <= p[0]) || t.iter().any(|&x| x < lo || x > hi) {
                    return Err(Error::input("theta_nodes must be increasing inside the theta range"));
                }
                if w.iter().any(|&x| !(x > 0.0)) {
                    return Err(Error::input("quadrature weights must be positive"));
                }
                (t.clone(), w.clone())
            }
            (None, None) => gauss_legendre(cfg.nodes, lo, hi)?,
            _ => return Err(Error::input("theta_nodes and quadrature_weights go together")),
        };
        let n = base.dim();
        let slope = cfg.family.perp_premium_slope.clone().unwrap_or_else(|| vec![0.0; n]);
        if slope.len() != n {
            return Err(Error::input("perp_premium_slope has wrong length"));
        }
        if let Some(o) = cfg.family.overrides.iter().find(|o| o.node >= thetas.len()) {
            return Err(Error::input(format!("override for node {} out of range", o.node)));
        }
        let mut models = Vec::with_capacity(thetas.len());
        for (k, &theta) in thetas.iter().enumerate() {
            let scale = theta.powf(-cfg.family.portfolio_exponent);
            let mut perp: Vec<f64> = base.premium_perp.iter().zip(&slope).map(|(a, s)| a + theta * s).collect();
            let mut portfolio: Vec<f64> = base.portfolio.iter().map(|a| a * scale).collect();
            let mut consumption = base.spec().consumption_loading.clone();
            for o in cfg.family.overrides.iter().filter(|o| o.node == k) {
                if let Some(p) = &o.premium_loading_perp {
                    perp = p.clone();
                }
                if let Some(p) = &o.portfolio_loading {
                    portfolio = p.clone();
                }
                if let Some(c) = &o.consumption_loading {
                    consumption = c.clone();
                }
            }
            models.push(base.with_agent_loadings(Some(&perp), Some(&portfolio), Some(&consumption))?);
        }
        Ok(Self {
            thetas,
            weights,
            theta_min: lo,
            theta_max: hi,
            density_f: cfg.density_f,
            density_g: cfg.density_g,
            base_utility: cfg.base_utility,
            models,
        })
    }

    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    fn corrected(&self, d: &Density, theta: f64, x: f64) -> f64 {
        d.pdf(theta / x) / d.mass(self.theta_min / x, self.theta_max / x)
    }

    /// `x^θ(x)`: `f(θ/x)` divided by the truncated mass.
    pub fn weight_x(&self, theta: f64, x: f64) -> f64 {
        self.corrected(&self.density_f, theta, x)
    }

    /// `y^θ(y)`: `g(θ/y)` divided by the truncated mass.
    pub fn weight_y(&self, theta: f64, y: f64) -> f64 {
        self.corrected(&self.density_g, theta, y)
    }

    /// `Σ_k w_k x^{θ_k}(x)`, equal to `x` up to quadrature error.
    pub fn normalization_x(&self, x: f64) -> f64 {
        self.thetas.iter().zip(&self.weights).map(|(&t, w)| w * self.weight_x(t, x)).sum()
    }

    pub fn normalization_y(&self, y: f64) -> f64 {
        self.thetas.iter().zip(&self.weights).map(|(&t, w)| w * self.weight_y(t, y)).sum()
    }
}

/// Per-node bundles simulated with one shared configuration (and seed).
#[derive(Clone, Debug)]
pub struct MixtureBundle {
    pub bundles: Vec<PathBundle>,
}

pub fn simulate_mixture(mix: &MixtureSpec, sim: &SimConfig) -> Result<MixtureBundle> {
    let bundles = mix.models.iter().map(|m| simulate_market(m, sim)).collect::<Result<_>>()?;
    Ok(MixtureBundle { bundles })
}

impl MixtureBundle {
    pub fn n_paths(&self) -> usize {
        self.bundles[0].n_paths
    }

    pub fn grid(&self) -> &[f64] {
        &self.bundles[0].grid
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BarValues {
    pub x_bar: f64,
    pub y_bar: f64,
    /// `Σ_k w_k x^{θ_k}(x) ζ^{θ_k}_t X^{θ_k}_t`.
    pub consumption_bar: f64,
}

/// Aggregate wealth, state price and consumption at one path and record.
pub fn bar_processes(mix: &MixtureSpec, mb: &MixtureBundle, x: f64, y: f64, path: usize, rec: usize) -> BarValues {
    let mut v = BarValues { x_bar: 0.0, y_bar: 0.0, consumption_bar: 0.0 };
    for (k, b) in mb.bundles.iter().enumerate() {
        let (wx, wy) = (
            mix.weights[k] * mix.weight_x(mix.thetas[k], x),
            mix.weights[k] * mix.weight_y(mix.thetas[k], y),
        );
        let i = path * b.n_records() + rec;
        v.x_bar += wx * b.log_wealth.as_ref().unwrap()[i].exp();
        v.y_bar += wy * b.log_state_price[i].exp();
        v.consumption_bar += wx * b.consumption_rate.as_ref().unwrap()[i];
    }
    v
}

pub fn bar_x(mix: &MixtureSpec, mb: &MixtureBundle, x: f64, path: usize, rec: usize) -> f64 {
    mb.bundles
        .iter()
        .enumerate()
        .map(|(k, b)| mix.weights[k] * mix.weight_x(mix.thetas[k], x) * b.log_x(path, rec).unwrap().exp())
        .sum()
}

pub fn bar_y(mix: &MixtureSpec, mb: &MixtureBundle, y: f64, path: usize, rec: usize) -> f64 {
    mb.bundles
        .iter()
        .enumerate()
        .map(|(k, b)| mix.weights[k] * mix.weight_y(mix.thetas[k], y) * b.log_y(path, rec).exp())
        .sum()
}

/// `Σ_k ω_k B_k` with `ω_k = c_k / Σ_j c_j`. The weights are normalized
/// first, so a single node returns its price unchanged.
pub fn mixture_bond_price(raw_weights: &[f64], bonds: &[f64]) -> f64 {
    let total: f64 = raw_weights.iter().sum();
    raw_weights.iter().zip(bonds).map(|(c, b)| (c / total) * b).sum()
}

/// Raw mixture weights `w_k y^{θ_k}(y) Y^{θ_k}_t` at one path and record.
pub fn bond_weights_on_path(mix: &MixtureSpec, mb: &MixtureBundle, y: f64, path: usize, rec: usize) -> Vec<f64> {
    mb.bundles
        .iter()
        .enumerate()
        .map(|(k, b)| mix.weights[k] * mix.weight_y(mix.thetas[k], y) * b.log_y(path, rec).exp())
        .collect()
}

/// Raw weights at `t = 0`, where every `Y^θ_0 = 1`.
pub fn initial_bond_weights(mix: &MixtureSpec, y: f64) -> Vec<f64> {
    mix.thetas
        .iter()
        .zip(&mix.weights)
        .map(|(&t, w)| w * mix.weight_y(t, y))
        .collect()
}

/// Per-node bond prices `B^θ(t, T)` at state `ξ`, `[node][tenor]`.
pub fn per_theta_bond_prices(mix: &MixtureSpec, t: f64, xi: &DVector<f64>, tenors: &[f64], step: f64) -> Result<Vec<Vec<f64>>> {
    mix.models
        .iter()
        .map(|m| {
            tenors
                .iter()
                .map(|&mat| {
                    let sol = bond_riccati_from(m, t, mat, step.min(mat - t))?;
                    Ok(bond_price(&sol, t, xi))
                })
                .collect()
        })
        .collect()
}

/// Wealth-dependent curve at `t = 0`, labelled by `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureCurve {
    pub y: f64,
    pub tenors: Vec<f64>,
    pub bond_prices: Vec<f64>,
    pub zero_rates: Vec<f64>,
    /// `B^{θ_k}(0, T_j)`, `[node][tenor]`.
    pub per_theta: Vec<Vec<f64>>,
    pub raw_weights: Vec<f64>,
}

/// One curve per `y`, sharing the per-node Riccati solves.
pub fn mixture_yield_curves(mix: &MixtureSpec, ys: &[f64], tenors: &[f64], step: f64) -> Result<Vec<MixtureCurve>> {
    if ys.iter().any(|&y| !(y > 0.0 && y.is_finite())) {
        return Err(Error::input("y values must be positive"));
    }
    let xi0 = &mix.models[0].xi0;
    let per_theta = per_theta_bond_prices(mix, 0.0, xi0, tenors, step)?;
    Ok(ys
        .iter()
        .map(|&y| {
            let raw = initial_bond_weights(mix, y);
            let prices: Vec<f64> = (0..tenors.len())
                .map(|j| {
                    let b: Vec<f64> = per_theta.iter().map(|row| row[j]).collect();
                    mixture_bond_price(&raw, &b)
                })
                .collect();
            let curve = YieldCurve::from_prices(0.0, tenors.to_vec(), prices, vec![0.0; tenors.len()], String::new());
            MixtureCurve {
                y,
                tenors: curve.tenors,
                bond_prices: curve.bond_prices,
                zero_rates: curve.zero_rates,
                per_theta: per_theta.clone(),
                raw_weights: raw,
            }
        })
        .collect())
}

pub fn mixture_yield_curve(mix: &MixtureSpec, y: f64, tenors: &[f64], step: f64) -> Result<MixtureCurve> {
    Ok(mixture_yield_curves(mix, &[y], tenors, step)?.remove(0))
}

/// `y,tenor,bond_price,zero_rate` rows for a family of curves.
pub fn y_sweep_csv(curves: &[MixtureCurve]) -> String {
    let mut out = String::from("y,tenor,bond_price,zero_rate\n");
    for c in curves {
        for j in 0..c.tenors.len() {
            out.push_str(&csv_row([
                fmt_f64(c.y),
                fmt_f64(c.tenors[j]),
                fmt_f64(c.bond_prices[j]),
                fmt_f64(c.zero_rates[j]),
            ]));
        }
    }
    out
}

/// `theta,weight_at_y,Y_theta_t,B_theta` for one curve at `t = 0` and the
/// tenor with index `tenor`.
pub fn theta_diagnostics_csv(mix: &MixtureSpec, curve: &MixtureCurve, tenor: usize) -> String {
    let mut out = String::from("theta,weight_at_y,Y_theta_t,B_theta\n");
    for k in 0..mix.len() {
        out.push_str(&csv_row([
            fmt_f64(mix.thetas[k]),
            fmt_f64(mix.weight_y(mix.thetas[k], curve.y)),
            fmt_f64(1.0),
            fmt_f64(curve.per_theta[k][tenor]),
        ]));
    }
    out
}

/// Solves `X̄_t(x) = z` by bisection on `log x`, to relative tolerance
/// `1e-12`.
pub fn invert_bar_x(mix: &MixtureSpec, mb: &MixtureBundle, path: usize, rec: usize, z: f64) -> Result<f64> {
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::input("inversion target must be positive"));
    }
    let f = |x: f64| bar_x(mix, mb, x, path, rec);
    let (mut lo, mut hi) = (1.0f64, 1.0f64);
    for _ in 0..200 {
        let v = f(lo);
        if v.is_finite() && v < z {
            break;
        }
        lo *= 0.5;
    }
    for _ in 0..200 {
        let v = f(hi);
        if v.is_finite() && v > z {
            break;
        }
        hi *= 2.0;
    }
    let (flo, fhi) = (f(lo), f(hi));
    if !(flo.is_finite() && fhi.is_finite() && flo < z && z < fhi) {
        return Err(Error::BracketFailure { target: z, low: flo, high: fhi });
    }
    while (hi - lo) > 1e-12 * hi {
        let mid = (lo * hi).sqrt();
        if f(mid) < z {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo * hi).sqrt())
}

/// `U_x(t, x) = Ȳ_t(u_x(𝒳̄_t(x)))` with `𝒳̄_t` the inverse flow of `X̄_t`.
pub fn reconstruct_marginal_utility(mix: &MixtureSpec, mb: &MixtureBundle, path: usize, rec: usize, x: f64) -> Result<f64> {
    let inv = invert_bar_x(mix, mb, path, rec, x)?;
    Ok(bar_y(mix, mb, mix.base_utility.marginal(inv), path, rec))
}

/// `exp(∫ζ) X̄_t(x) Ȳ_t(y)` on every path and record, with `ζ` taken from
/// the first node. A martingale when all nodes share the consumption
/// loading. Flattened `[path][record]`.
pub fn aggregate_martingale(mix: &MixtureSpec, mb: &MixtureBundle, x: f64, y: f64) -> Vec<f64> {
    let m = mb.grid().len();
    let first = &mb.bundles[0];
    let mut out = Vec::with_capacity(mb.n_paths() * m);
    for p in 0..mb.n_paths() {
        for r in 0..m {
            let v = bar_processes(mix, mb, x, y, p, r);
            out.push(first.int_consumption(p, r).exp() * v.x_bar * v.y_bar);
        }
    }
    out
}
