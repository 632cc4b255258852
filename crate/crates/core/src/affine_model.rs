//! Affine factor model: parameters, admissibility checks and the pointwise
//! coefficient maps (drift, eigenvariances, diffusion).
//!
//! The factor follows
//!
//! ```text
//! dξ = (ϱ ξ + δ⁰) dt + Θ diag(√λ(ξ)) dW,     λ_i(ξ) = ρ_i · ξ + λ⁰_i
//! ```
//!
//! and every loading `a` maps to the volatility vector `ãΘs(ξ)` whose
//! component `j` is `(Θᵀa)_j √λ_j(ξ)`. The admissible portfolio directions are
//! the loadings supported on a coordinate subset `E`.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Affine map `ξ ↦ a·ξ + b` as it appears in the JSON model file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineLoading {
    pub a: Vec<f64>,
    pub b: f64,
}

impl AffineLoading {
    pub fn constant(dim: usize, b: f64) -> Self {
        Self { a: vec![0.0; dim], b }
    }
}

/// Raw model parameterization, field-for-field the JSON document.
///
/// Matrices are row-major arrays of arrays. `admissible_coords` lists the
/// 1-based factor coordinates spanning the admissible loading space `E`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineModelSpec {
    pub dim: usize,
    pub drift_matrix: Vec<Vec<f64>>,
    pub drift_intercept: Vec<f64>,
    pub vol_loading: Vec<Vec<f64>>,
    pub eigen_intercepts: Vec<f64>,
    pub eigen_loadings: Vec<Vec<f64>>,
    pub admissible_coords: Vec<usize>,
    pub rate_loading: AffineLoading,
    pub consumption_loading: AffineLoading,
    #[serde(rename = "premium_loading_R")]
    pub premium_loading_r: Vec<f64>,
    pub premium_loading_perp: Vec<f64>,
    pub portfolio_loading: Vec<f64>,
    pub xi0: Vec<f64>,
}

impl AffineModelSpec {
    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    /// Canonical form: admissible coordinates sorted. Everything else is
    /// already in a fixed order.
    pub fn canonicalized(&self) -> Self {
        let mut spec = self.clone();
        spec.admissible_coords.sort_unstable();
        spec
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(&self.canonicalized()).expect("spec serializes")
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        hex::encode(digest)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InvariantCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<InvariantCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &InvariantCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&InvariantCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn push(&mut self, name: &'static str, violations: Vec<String>) {
        let passed = violations.is_empty();
        let detail = if passed {
            "ok".to_string()
        } else {
            violations.join("; ")
        };
        self.checks.push(InvariantCheck {
            name,
            passed,
            detail,
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed() {
            return write!(f, "all {} invariants hold", self.checks.len());
        }
        let failed: Vec<String> = self
            .failures()
            .map(|c| format!("{}: {}", c.name, c.detail))
            .collect();
        write!(f, "{}", failed.join(" | "))
    }
}

pub const CHECK_SHAPES: &str = "shapes";
pub const CHECK_FINITE: &str = "finite_entries";
pub const CHECK_EIGEN_INTERCEPTS: &str = "eigen_intercepts";
pub const CHECK_INITIAL_EIGENVARIANCES: &str = "initial_eigenvariances";
pub const CHECK_ADMISSIBLE_COORDS: &str = "admissible_coords";
pub const CHECK_PREMIUM_R_SUPPORT: &str = "premium_loading_R_support";
pub const CHECK_PREMIUM_PERP_SUPPORT: &str = "premium_loading_perp_support";
pub const CHECK_PORTFOLIO_SUPPORT: &str = "portfolio_loading_support";
pub const CHECK_VOL_BLOCK: &str = "vol_loading_block_commutation";
pub const CHECK_DRIFT_BLOCK: &str = "drift_matrix_block_commutation";
pub const CHECK_RATE_POSITIVE: &str = "rate_loading_positive";
pub const CHECK_CONSUMPTION_POSITIVE: &str = "consumption_loading_positive";

fn shape_violations(spec: &AffineModelSpec) -> Vec<String> {
    let n = spec.dim;
    let mut v = Vec::new();
    if n == 0 {
        v.push("dim must be positive".to_string());
        return v;
    }
    let mut vector = |name: &str, len: usize| {
        if len != n {
            v.push(format!("{name} has length {len}, expected {n}"));
        }
    };
    vector("drift_intercept", spec.drift_intercept.len());
    vector("eigen_intercepts", spec.eigen_intercepts.len());
    vector("rate_loading.a", spec.rate_loading.a.len());
    vector("consumption_loading.a", spec.consumption_loading.a.len());
    vector("premium_loading_R", spec.premium_loading_r.len());
    vector("premium_loading_perp", spec.premium_loading_perp.len());
    vector("portfolio_loading", spec.portfolio_loading.len());
    vector("xi0", spec.xi0.len());
    for (name, m) in [
        ("drift_matrix", &spec.drift_matrix),
        ("vol_loading", &spec.vol_loading),
        ("eigen_loadings", &spec.eigen_loadings),
    ] {
        if m.len() != n || m.iter().any(|row| row.len() != n) {
            v.push(format!("{name} is not {n}x{n}"));
        }
    }
    v
}

/// Checks every admissibility invariant of a raw spec and reports each one
/// separately, naming the offending entries.
pub fn validate_spec(spec: &AffineModelSpec) -> ValidationReport {
    let mut report = ValidationReport::default();
    let shapes = shape_violations(spec);
    let shapes_ok = shapes.is_empty();
    report.push(CHECK_SHAPES, shapes);
    if !shapes_ok {
        return report;
    }
    let n = spec.dim;

    let mut non_finite = Vec::new();
    let mut scan = |name: &str, xs: &[f64]| {
        for (i, x) in xs.iter().enumerate() {
            if !x.is_finite() {
                non_finite.push(format!("{name}[{i}] = {x}"));
            }
        }
    };
    for (name, m) in [
        ("drift_matrix", &spec.drift_matrix),
        ("vol_loading", &spec.vol_loading),
        ("eigen_loadings", &spec.eigen_loadings),
    ] {
        for (i, row) in m.iter().enumerate() {
            scan(&format!("{name}[{i}]"), row);
        }
    }
    scan("drift_intercept", &spec.drift_intercept);
    scan("eigen_intercepts", &spec.eigen_intercepts);
    scan("rate_loading.a", &spec.rate_loading.a);
    scan("rate_loading.b", &[spec.rate_loading.b]);
    scan("consumption_loading.a", &spec.consumption_loading.a);
    scan("consumption_loading.b", &[spec.consumption_loading.b]);
    scan("premium_loading_R", &spec.premium_loading_r);
    scan("premium_loading_perp", &spec.premium_loading_perp);
    scan("portfolio_loading", &spec.portfolio_loading);
    scan("xi0", &spec.xi0);
    report.push(CHECK_FINITE, non_finite);

    report.push(
        CHECK_EIGEN_INTERCEPTS,
        spec.eigen_intercepts
            .iter()
            .enumerate()
            .filter(|(_, &l)| l < 0.0)
            .map(|(i, l)| format!("eigen_intercepts[{i}] = {l} < 0"))
            .collect(),
    );

    report.push(
        CHECK_INITIAL_EIGENVARIANCES,
        (0..n)
            .filter_map(|i| {
                let lam = dot(&spec.eigen_loadings[i], &spec.xi0) + spec.eigen_intercepts[i];
                (lam < 0.0).then(|| format!("lambda_{}(xi0) = {lam} < 0", i + 1))
            })
            .collect(),
    );

    let mut coord_violations = Vec::new();
    let mut in_e = vec![false; n];
    for &c in &spec.admissible_coords {
        if c == 0 || c > n {
            coord_violations.push(format!("coordinate {c} outside 1..={n}"));
        } else if in_e[c - 1] {
            coord_violations.push(format!("coordinate {c} listed twice"));
        } else {
            in_e[c - 1] = true;
        }
    }
    report.push(CHECK_ADMISSIBLE_COORDS, coord_violations);

    let support = |name: &str, a: &[f64], inside: bool| -> Vec<String> {
        a.iter()
            .enumerate()
            .filter(|&(i, &x)| in_e[i] != inside && x != 0.0)
            .map(|(i, x)| {
                let place = if inside { "outside" } else { "inside" };
                format!("{name}[{}] = {x} is {place} E", i + 1)
            })
            .collect()
    };
    report.push(
        CHECK_PREMIUM_R_SUPPORT,
        support("premium_loading_R", &spec.premium_loading_r, true),
    );
    report.push(
        CHECK_PREMIUM_PERP_SUPPORT,
        support("premium_loading_perp", &spec.premium_loading_perp, false),
    );
    report.push(
        CHECK_PORTFOLIO_SUPPORT,
        support("portfolio_loading", &spec.portfolio_loading, true),
    );

    let block = |name: &str, m: &[Vec<f64>]| -> Vec<String> {
        let mut v = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if in_e[i] != in_e[j] && m[i][j] != 0.0 {
                    v.push(format!("{name}[{}][{}] = {} couples E and its complement", i + 1, j + 1, m[i][j]));
                }
            }
        }
        v
    };
    report.push(CHECK_VOL_BLOCK, block("vol_loading", &spec.vol_loading));
    report.push(CHECK_DRIFT_BLOCK, block("drift_matrix", &spec.drift_matrix));

    let positive = |name: &str, l: &AffineLoading| -> Vec<String> {
        let mut v: Vec<String> = l
            .a
            .iter()
            .enumerate()
            .filter(|(_, &x)| x < 0.0)
            .map(|(i, x)| format!("{name}.a[{}] = {x} < 0", i + 1))
            .collect();
        if l.b < 0.0 {
            v.push(format!("{name}.b = {} < 0", l.b));
        }
        v
    };
    report.push(CHECK_RATE_POSITIVE, positive("rate_loading", &spec.rate_loading));
    report.push(
        CHECK_CONSUMPTION_POSITIVE,
        positive("consumption_loading", &spec.consumption_loading),
    );
    report
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    DMatrix::from_fn(n, n, |i, j| rows[i][j])
}

/// Affine scalar functional `ξ ↦ grad·ξ + intercept`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineFunctional {
    pub grad: DVector<f64>,
    pub intercept: f64,
}

impl AffineFunctional {
    pub fn eval(&self, xi: &DVector<f64>) -> f64 {
        self.grad.dot(xi) + self.intercept
    }

    fn from_loading(l: &AffineLoading) -> Self {
        Self {
            grad: DVector::from_column_slice(&l.a),
            intercept: l.b,
        }
    }
}

/// Eigenvariances at a factor state, after full truncation at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenVariances {
    pub values: DVector<f64>,
    pub clipped: Vec<bool>,
}

impl EigenVariances {
    pub fn clip_count(&self) -> usize {
        self.clipped.iter().filter(|&&c| c).count()
    }
}

/// A validated affine model. Immutable; all methods are pure in `(self, ξ)`.
#[derive(Clone, Debug)]
pub struct AffineModel {
    spec: AffineModelSpec,
    hash: String,
    in_e: Vec<bool>,
    pub drift_matrix: DMatrix<f64>,
    pub drift_intercept: DVector<f64>,
    pub vol_loading: DMatrix<f64>,
    pub eigen_intercepts: DVector<f64>,
    /// Row `i` is the gradient `ρ_i` of eigenvariance `λ_i`.
    pub eigen_loadings: DMatrix<f64>,
    pub rate: AffineFunctional,
    pub consumption: AffineFunctional,
    pub premium_r: DVector<f64>,
    pub premium_perp: DVector<f64>,
    pub portfolio: DVector<f64>,
    pub xi0: DVector<f64>,
}

impl AffineModel {
    pub fn new(spec: AffineModelSpec) -> Result<Self> {
        let report = validate_spec(&spec);
        if !report.passed() {
            return Err(Error::InvalidSpec(report));
        }
        let spec = spec.canonicalized();
        let n = spec.dim;
        let mut in_e = vec![false; n];
        for &c in &spec.admissible_coords {
            in_e[c - 1] = true;
        }
        Ok(Self {
            hash: spec.content_hash(),
            in_e,
            drift_matrix: matrix(&spec.drift_matrix),
            drift_intercept: DVector::from_column_slice(&spec.drift_intercept),
            vol_loading: matrix(&spec.vol_loading),
            eigen_intercepts: DVector::from_column_slice(&spec.eigen_intercepts),
            eigen_loadings: matrix(&spec.eigen_loadings),
            rate: AffineFunctional::from_loading(&spec.rate_loading),
            consumption: AffineFunctional::from_loading(&spec.consumption_loading),
            premium_r: DVector::from_column_slice(&spec.premium_loading_r),
            premium_perp: DVector::from_column_slice(&spec.premium_loading_perp),
            portfolio: DVector::from_column_slice(&spec.portfolio_loading),
            xi0: DVector::from_column_slice(&spec.xi0),
            spec,
        })
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(AffineModelSpec::from_json_file(path)?)
    }

    pub fn spec(&self) -> &AffineModelSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn content_hash(&self) -> &str {
        &self.hash
    }

    pub fn in_admissible(&self, i: usize) -> bool {
        self.in_e[i]
    }

    /// Combined log-volatility loading of the state price, `a^{Y,⊥} − a^{Y,R}`.
    pub fn state_price_loading(&self) -> DVector<f64> {
        &self.premium_perp - &self.premium_r
    }

    pub fn project_admissible(&self, a: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(a.len(), |i, _| if self.in_e[i] { a[i] } else { 0.0 })
    }

    pub fn project_orthogonal(&self, a: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(a.len(), |i, _| if self.in_e[i] { 0.0 } else { a[i] })
    }

    /// `λ_i(ξ) = ρ_i·ξ + λ⁰_i`, negative values truncated to zero and flagged.
    pub fn eigen_variances(&self, xi: &DVector<f64>) -> EigenVariances {
        let raw = &self.eigen_loadings * xi + &self.eigen_intercepts;
        let clipped: Vec<bool> = raw.iter().map(|&l| l < 0.0).collect();
        EigenVariances {
            values: raw.map(|l| l.max(0.0)),
            clipped,
        }
    }

    /// `ϱ ξ + δ⁰`.
    pub fn drift(&self, xi: &DVector<f64>) -> DVector<f64> {
        &self.drift_matrix * xi + &self.drift_intercept
    }

    /// `Θ · diag(√λ⁺(ξ))`.
    pub fn diffusion_matrix(&self, xi: &DVector<f64>) -> DMatrix<f64> {
        let lam = self.eigen_variances(xi).values;
        let mut m = self.vol_loading.clone();
        for (j, mut col) in m.column_iter_mut().enumerate() {
            col *= lam[j].sqrt();
        }
        m
    }

    /// Volatility vector `ãΘs(ξ)` of the affine process `a·ξ`.
    pub fn vol_vector(&self, a: &DVector<f64>, xi: &DVector<f64>) -> DVector<f64> {
        let lam = self.eigen_variances(xi).values;
        let proj = self.vol_loading.tr_mul(a);
        DVector::from_fn(a.len(), |j, _| proj[j] * lam[j].sqrt())
    }

    pub fn short_rate(&self, xi: &DVector<f64>) -> f64 {
        self.rate.eval(xi)
    }

    pub fn consumption_rate(&self, xi: &DVector<f64>) -> f64 {
        self.consumption.eval(xi)
    }

    /// Same model with the per-agent loadings replaced. The result is
    /// revalidated, so support violations are rejected.
    pub fn with_agent_loadings(
        &self,
        premium_perp: Option<&[f64]>,
        portfolio: Option<&[f64]>,
        consumption: Option<&AffineLoading>,
    ) -> Result<Self> {
        let mut spec = self.spec.clone();
        if let Some(p) = premium_perp {
            spec.premium_loading_perp = p.to_vec();
        }
        if let Some(p) = portfolio {
            spec.portfolio_loading = p.to_vec();
        }
        if let Some(c) = consumption {
            spec.consumption_loading = c.clone();
        }
        Self::new(spec)
    }
}
