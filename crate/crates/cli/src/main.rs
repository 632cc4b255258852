//! `ramsey`: batch front end for the bond-pricing library.

mod job;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use ramsey_core::affine_model::AffineModelSpec;
use ramsey_core::mc_oracle::{SimConfig, Verdict};
use ramsey_core::mixture::MixtureConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use job::{Failure, Job, McSettings};

#[derive(Parser, Debug)]
#[command(name = "ramsey", version, about = "Marginal-utility bond prices in affine factor models")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Model JSON file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, env = "RAMSEY_OUT_DIR", default_value = "ramsey-out")]
    out: PathBuf,

    /// Seed of the Monte Carlo runs.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Solver step (simulation step for `simulate`).
    #[arg(long, global = true)]
    step: Option<f64>,

    /// Number of Monte Carlo paths.
    #[arg(long, global = true)]
    paths: Option<usize>,

    /// Run the Monte Carlo cross-check where the command has one.
    #[arg(long, global = true)]
    verify: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check the model invariants and print the report.
    Validate,
    /// Zero-coupon curve at t = 0.
    Curve {
        #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,30")]
        tenors: Vec<f64>,
        /// Simulation step of the `--verify` run.
        #[arg(long, default_value_t = 0.01)]
        mc_step: f64,
    },
    /// Long-rate classification at the initial state.
    Longrate {
        #[arg(long, default_value_t = 200.0)]
        t_max: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Backward power-utility constraint diagnostics.
    BackwardPower {
        #[arg(long)]
        theta: f64,
        #[arg(long, default_value_t = 1.0)]
        horizon: f64,
        /// Bound on the pathwise constraint error.
        #[arg(long, default_value_t = 5e-3)]
        tolerance: f64,
    },
    /// Wealth-dependent curves of a risk-aversion mixture.
    MixtureCurve {
        /// Mixture JSON file; defaults apply when absent.
        #[arg(long)]
        mixture: Option<PathBuf>,
        #[arg(long = "y", value_delimiter = ',', default_value = "0.25,0.5,1,2,4")]
        ys: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,30")]
        tenors: Vec<f64>,
        /// Value of y for the per-node diagnostics; the first y by default.
        #[arg(long)]
        diagnostics_y: Option<f64>,
    },
    /// Simulate the optimal market and test the wealth martingale.
    Simulate {
        /// Simulation JSON file; flags override its fields.
        #[arg(long)]
        sim: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        buckets: usize,
    },
    /// Execute the effective configuration recorded in a manifest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct OutputFile {
    file: String,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    command: String,
    config_hash: String,
    step: Option<f64>,
    seed: Option<u64>,
    tool_version: String,
    wall_time_seconds: f64,
    outputs: Vec<OutputFile>,
    verdicts: BTreeMap<String, Verdict>,
    effective_config: Job,
}

const MANIFEST: &str = "manifest.json";

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_model(path: Option<&Path>) -> Result<AffineModelSpec, Failure> {
    let path = path.ok_or_else(|| Failure::Config("--config is required".into()))?;
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn build_job(cli: &Cli) -> Result<Job, Failure> {
    let model = || read_model(cli.config.as_deref());
    let job = match &cli.command {
        Command::Validate => Job::Validate { model: model()? },
        Command::Curve { tenors, mc_step } => Job::Curve {
            model: model()?,
            tenors: tenors.clone(),
            step: cli.step.unwrap_or(1e-3),
            verify: cli.verify.then_some(McSettings {
                paths: cli.paths.unwrap_or(20_000),
                step: *mc_step,
                seed: cli.seed.unwrap_or(1),
            }),
        },
        Command::Longrate { t_max, tolerance } => Job::Longrate {
            model: model()?,
            t_max: *t_max,
            step: cli.step.unwrap_or(0.01),
            tolerance: *tolerance,
        },
        Command::BackwardPower { theta, horizon, tolerance } => {
            let step = cli.step.unwrap_or(1e-3);
            let seed = cli.seed.unwrap_or(1);
            Job::BackwardPower {
                model: model()?,
                theta: *theta,
                horizon: *horizon,
                step,
                paths: cli.paths.unwrap_or(200),
                seed,
                tolerance: *tolerance,
                verify: cli.verify.then_some(McSettings {
                    paths: 20_000,
                    step,
                    seed,
                }),
            }
        }
        Command::MixtureCurve { mixture, ys, tenors, diagnostics_y } => {
            let mixture = match mixture {
                Some(p) => read_json::<MixtureConfig>(p)?,
                None => MixtureConfig::default(),
            };
            let first = *ys.first().ok_or_else(|| Failure::Config("no y values".into()))?;
            Job::MixtureCurve {
                model: model()?,
                mixture,
                ys: ys.clone(),
                tenors: tenors.clone(),
                step: cli.step.unwrap_or(1e-3),
                diagnostics_y: diagnostics_y.unwrap_or(first),
            }
        }
        Command::Simulate { sim, buckets } => {
            let mut cfg = match sim {
                Some(p) => read_json::<SimConfig>(p)?,
                None => SimConfig::new(1000, 0.01, 1.0, 1),
            };
            if let Some(n) = cli.paths {
                cfg.n_paths = n;
            }
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(h) = cli.step {
                cfg.step = h;
            }
            Job::Simulate {
                model: model()?,
                sim: cfg,
                buckets: *buckets,
            }
        }
        Command::Rerun { manifest } => read_json::<RunManifest>(manifest)?.effective_config,
    };
    Ok(job)
}

/// Writes through a temporary file in the same directory and renames it
/// into place.
fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), Failure> {
    let io = |e: std::io::Error| Failure::Io(format!("{}: {e}", dir.join(name).display()));
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, dir.join(name)).map_err(io)
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let job = build_job(cli)?;
    let started = Instant::now();
    let outcome = job.run()?;
    let wall = started.elapsed().as_secs_f64();

    fs::create_dir_all(&cli.out).map_err(|e| Failure::Io(format!("{}: {e}", cli.out.display())))?;
    let mut outputs = Vec::new();
    for (name, bytes) in &outcome.files {
        write_atomic(&cli.out, name, bytes)?;
        outputs.push(OutputFile {
            file: name.clone(),
            sha256: sha256_hex(bytes),
        });
    }
    let config = serde_json::to_string(&job).expect("job serializes");
    let manifest = RunManifest {
        command: job.name().to_string(),
        config_hash: sha256_hex(config.as_bytes()),
        step: job.step(),
        seed: job.seed(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_seconds: wall,
        outputs,
        verdicts: outcome.verdicts.clone(),
        effective_config: job,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_atomic(&cli.out, MANIFEST, text.as_bytes())?;
    for (name, _) in &outcome.files {
        println!("wrote {}", cli.out.join(name).display());
    }

    let failed = outcome.failed_verdicts();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(failed.join(", ")))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ramsey: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
