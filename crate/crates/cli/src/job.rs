//! Effective run configurations and their execution.
//!
//! A [`Job`] is the fully merged input of one command (files plus flags).
//! It is echoed into the manifest, and `rerun` executes it again unchanged.

use std::collections::BTreeMap;
use std::fmt;

use ramsey_core::affine_model::{validate_spec, AffineModel, AffineModelSpec};
use ramsey_core::error::Error;
use ramsey_core::market::{backward_constraint_error, simulate_market, simulate_state_price, solve_backward_power_constraint};
use ramsey_core::mc_oracle::{martingale_drift_test, mc_bond_prices, mc_power_constraint_check, SimConfig, Verdict};
use ramsey_core::mixture::{mixture_yield_curves, theta_diagnostics_csv, y_sweep_csv, MixtureConfig, MixtureSpec};
use ramsey_core::yield_curves::{bond_riccati, long_rate_classify, yield_curve};
use serde::{Deserialize, Serialize};

/// Monte Carlo settings of a verification run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McSettings {
    pub paths: usize,
    pub step: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Job {
    Validate {
        model: AffineModelSpec,
    },
    Curve {
        model: AffineModelSpec,
        tenors: Vec<f64>,
        step: f64,
        verify: Option<McSettings>,
    },
    Longrate {
        model: AffineModelSpec,
        t_max: f64,
        step: f64,
        tolerance: f64,
    },
    BackwardPower {
        model: AffineModelSpec,
        theta: f64,
        horizon: f64,
        step: f64,
        paths: usize,
        seed: u64,
        tolerance: f64,
        verify: Option<McSettings>,
    },
    MixtureCurve {
        model: AffineModelSpec,
        mixture: MixtureConfig,
        ys: Vec<f64>,
        tenors: Vec<f64>,
        step: f64,
        diagnostics_y: f64,
    },
    Simulate {
        model: AffineModelSpec,
        sim: SimConfig,
        buckets: usize,
    },
}

/// Failure classes with their process exit codes.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Numerical(String),
    Verification(String),
    Io(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Numerical(_) => 3,
            Failure::Verification(_) => 4,
            Failure::Io(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Numerical(m) => write!(f, "numerical failure: {m}"),
            Failure::Verification(m) => write!(f, "verification failed: {m}"),
            Failure::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidSpec(_) | Error::InvalidInput(_) | Error::Json(_) => Failure::Config(e.to_string()),
            Error::Blowup { .. } | Error::BracketFailure { .. } | Error::Inconclusive { .. } => {
                Failure::Numerical(e.to_string())
            }
            Error::Io(_) => Failure::Io(e.to_string()),
        }
    }
}

/// Files and verdicts produced by one job.
#[derive(Debug, Default)]
pub struct Outcome {
    pub files: Vec<(String, Vec<u8>)>,
    pub verdicts: BTreeMap<String, Verdict>,
}

impl Outcome {
    fn file(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), bytes.into()));
    }

    fn json(&mut self, name: &str, value: &impl Serialize) {
        let mut text = serde_json::to_string_pretty(value).expect("outputs serialize");
        text.push('\n');
        self.file(name, text);
    }

    pub fn failed_verdicts(&self) -> Vec<&str> {
        self.verdicts
            .iter()
            .filter(|(_, v)| !v.passed())
            .map(|(k, _)| k.as_str())
            .collect()
    }
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Validate { .. } => "validate",
            Job::Curve { .. } => "curve",
            Job::Longrate { .. } => "longrate",
            Job::BackwardPower { .. } => "backward-power",
            Job::MixtureCurve { .. } => "mixture-curve",
            Job::Simulate { .. } => "simulate",
        }
    }

    pub fn model(&self) -> &AffineModelSpec {
        match self {
            Job::Validate { model }
            | Job::Curve { model, .. }
            | Job::Longrate { model, .. }
            | Job::BackwardPower { model, .. }
            | Job::MixtureCurve { model, .. }
            | Job::Simulate { model, .. } => model,
        }
    }

    pub fn step(&self) -> Option<f64> {
        match self {
            Job::Validate { .. } => None,
            Job::Curve { step, .. }
            | Job::Longrate { step, .. }
            | Job::BackwardPower { step, .. }
            | Job::MixtureCurve { step, .. } => Some(*step),
            Job::Simulate { sim, .. } => Some(sim.step),
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Job::Curve { verify, .. } => verify.as_ref().map(|v| v.seed),
            Job::BackwardPower { seed, .. } => Some(*seed),
            Job::Simulate { sim, .. } => Some(sim.seed),
            _ => None,
        }
    }

    pub fn run(&self) -> Result<Outcome, Failure> {
        let spec = self.model();
        if let Job::Validate { .. } = self {
            let report = validate_spec(spec);
            println!("{report}");
            if !report.passed() {
                return Err(Failure::Config("model specification rejected".into()));
            }
            let mut out = Outcome::default();
            out.json("validation.json", &report);
            out.verdicts.insert("validation".into(), Verdict::Pass);
            return Ok(out);
        }
        let model = AffineModel::new(spec.clone())?;
        let mut out = Outcome::default();
        match self {
            Job::Validate { .. } => unreachable!(),
            Job::Curve { tenors, step, verify, .. } => {
                let curve = yield_curve(&model, tenors, *step)?;
                out.file("curve.csv", curve.to_csv());
                let last = *tenors.last().unwrap();
                out.file("riccati.csv", bond_riccati(&model, last, step.min(last))?.to_csv());
                if let Some(mc) = verify {
                    let sim = SimConfig::new(mc.paths, mc.step, last, mc.seed);
                    let estimates = mc_bond_prices(&model, &sim, tenors)?;
                    let mut records = Vec::new();
                    for (j, est) in estimates.iter().enumerate() {
                        let name = format!("bond_T{}", tenors[j]);
                        let ok = (est.mean - curve.bond_prices[j]).abs() <= 3.0 * est.std_error;
                        let verdict = Verdict::from_bool(ok);
                        out.verdicts.insert(name.clone(), verdict);
                        records.push(est.record(&name, mc.seed, Some(verdict)));
                    }
                    out.json("verify.json", &records);
                }
            }
            Job::Longrate { t_max, step, tolerance, .. } => {
                let report = long_rate_classify(&model, &model.xi0, *t_max, *step, *tolerance)?;
                println!("long-rate class: {:?}", report.class);
                out.json("longrate.json", &report);
            }
            Job::BackwardPower { theta, horizon, step, paths, seed, tolerance, verify, .. } => {
                let sol = solve_backward_power_constraint(&model, *theta, *horizon, *step)?;
                let residual = sol.orthogonal_identity_residual(&model);
                let mut sim = SimConfig::new(*paths, *step, *horizon, *seed);
                sim.store_noise = true;
                let bundle = simulate_state_price(&model, &sim)?;
                let err = backward_constraint_error(&model, &sol, &bundle)?;
                out.verdicts
                    .insert("orthogonal_identity".into(), Verdict::from_bool(residual <= 1e-8));
                out.verdicts
                    .insert("terminal_constraint".into(), Verdict::from_bool(err.sup < *tolerance));
                let check = match verify {
                    Some(mc) => {
                        let sim = SimConfig::new(mc.paths, mc.step, *horizon, mc.seed);
                        let c = mc_power_constraint_check(&model, &sim, *theta, *horizon)?;
                        out.verdicts.insert("mc_constraint".into(), c.verdict);
                        Some(c)
                    }
                    None => None,
                };
                out.json(
                    "backward_power.json",
                    &serde_json::json!({
                        "theta": theta,
                        "horizon": horizon,
                        "step": step,
                        "orthogonal_identity_residual": residual,
                        "constraint_error": err,
                        "tolerance": tolerance,
                        "mc_check": check,
                    }),
                );
                out.file("power_riccati.csv", sol.riccati.to_csv());
            }
            Job::MixtureCurve { mixture, ys, tenors, step, diagnostics_y, .. } => {
                let mix = MixtureSpec::new(&model, mixture)?;
                let curves = mixture_yield_curves(&mix, ys, tenors, *step)?;
                out.file("y_sweep.csv", y_sweep_csv(&curves));
                let diag = mixture_yield_curves(&mix, &[*diagnostics_y], tenors, *step)?;
                out.file("theta_diagnostics.csv", theta_diagnostics_csv(&mix, &diag[0], tenors.len() - 1));
            }
            Job::Simulate { sim, buckets, .. } => {
                let bundle = simulate_market(&model, sim)?;
                let m = bundle.compensated_wealth_martingale()?;
                let test = martingale_drift_test(&bundle.grid, &m, *buckets)?;
                out.verdicts.insert("wealth_martingale".into(), test.verdict);
                out.file("paths_summary.csv", bundle.summary_csv());
                out.json(
                    "simulate.json",
                    &serde_json::json!({
                        "n_paths": bundle.n_paths,
                        "records": bundle.n_records(),
                        "clip_count": bundle.clip_count,
                        "martingale_test": test,
                    }),
                );
            }
        }
        Ok(out)
    }
}
