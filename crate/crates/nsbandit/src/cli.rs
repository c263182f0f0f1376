//! Command-line front end: TOML-configured multi-seed runs, one-axis
//! sweeps, and a self-verification suite.
//!
//! # Configuration
//!
//! Configurations are flat TOML files; unknown keys are rejected with an
//! error naming the key. Required keys: `dim`, `num_actions`,
//! `noise_std`, `horizon`, `algorithm`, `seeds` (a count expanding to
//! run indices `0..n`, or an explicit index list). Everything else has a
//! documented default — see [`RunConfig`].
//!
//! # Determinism
//!
//! A `(configuration, master seed)` pair fixes every output byte: run
//! `i` re-roots the counter-based generator at a stable hash of
//! `(master, i)`, the worker count only changes execution order, and
//! rows are sorted before writing. The master seed resolves as
//! command-line flag, then the `master_seed` config key, then the
//! `NSBANDIT_SEED` environment variable, then 0.
//!
//! # Exit codes
//!
//! 0 on success (for `verify`: all checks passed), 1 on runtime or
//! verification failure, 2 on configuration errors.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::Deserialize;

use crate::base_algs::{LinUcb, LinearThompson};
use crate::bench::{
    aggregate, atomic_write_csv, dynamic_regret, read_records_csv, records_from_logs, slope_fit,
    write_curve_csv, write_records_csv, RunRecord,
};
use crate::envs::{EnvSpec, EnvVariant, LinearBanditEnv};
use crate::error::Error;
use crate::master::{
    master_run, master_run_from, policy_run, sliding_window_run, test1_fails, test2_fails,
    MasterOptions, RoundLog, TestConfig,
};
use crate::nctf::{
    build_scheduler_net, cdf_attention, nctf_rollout, reference_coins, run_gate_pipeline,
    NctfConfig, TokenLayout, DEFAULT_COIN_TILT,
};
use crate::rng::{unit_uniform, SeedDerivation, StreamKind};
use crate::scheduler::{sigma1, sigma2, ws, Rho, TableRand, Triple};
use crate::Result;

/// Environment variable consulted for the master seed when neither the
/// `--seed` flag nor the `master_seed` config key is present.
pub const SEED_ENV: &str = "NSBANDIT_SEED";

/// Supported `b` values for the cosine-frequency sweep axis.
pub const COSINE_B_GRID: [f64; 2] = [0.018, 0.025];

/// The algorithm names accepted by the `algorithm` config key.
pub const ALGORITHM_NAMES: [&str; 6] =
    ["linucb", "ts", "master+linucb", "master+ts", "nctf+linucb", "sliding-window+linucb"];

/// Dispatchable algorithm selections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    /// Plain LinUCB over the whole horizon.
    LinUcb,
    /// Plain linear Thompson sampling.
    Thompson,
    /// The restart controller wrapping LinUCB.
    MasterLinUcb,
    /// The restart controller wrapping Thompson sampling.
    MasterThompson,
    /// The attention-realized controller wrapping LinUCB.
    NctfLinUcb,
    /// Fixed-window restarts wrapping LinUCB.
    SlidingWindowLinUcb,
}

impl Algorithm {
    /// Parses an `algorithm` config value.
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "linucb" => Algorithm::LinUcb,
            "ts" => Algorithm::Thompson,
            "master+linucb" => Algorithm::MasterLinUcb,
            "master+ts" => Algorithm::MasterThompson,
            "nctf+linucb" => Algorithm::NctfLinUcb,
            "sliding-window+linucb" => Algorithm::SlidingWindowLinUcb,
            other => {
                return Err(Error::config(format!(
                    "`algorithm` must be one of {}, got {other:?}",
                    ALGORITHM_NAMES.join("|")
                )))
            }
        })
    }
}

/// Seed specification: a count (`seeds = 8` expands to run indices
/// `0..8`) or an explicit list of run indices (`seeds = [3, 19]`).
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Seeds {
    /// Expand to indices `0..count`.
    Count(u64),
    /// Use exactly these indices.
    List(Vec<u64>),
}

impl Seeds {
    /// The run indices this specification expands to; never empty.
    pub fn indices(&self) -> Result<Vec<u64>> {
        let out = match self {
            Seeds::Count(n) => (0..*n).collect(),
            Seeds::List(v) => v.clone(),
        };
        if out.is_empty() {
            return Err(Error::config("`seeds` must name at least one run"));
        }
        Ok(out)
    }
}

fn d_env() -> String {
    "stationary".into()
}
fn d_base_high() -> f64 {
    0.2
}
fn d_elevated_low() -> f64 {
    0.8
}
fn d_elevated_high() -> f64 {
    1.0
}
fn d_b() -> f64 {
    0.018
}
fn d_true() -> bool {
    true
}
fn d_one() -> f64 {
    1.0
}
fn d_quarter() -> f64 {
    0.25
}
fn d_rho_exponent() -> f64 {
    -0.5
}
fn d_test1_mult() -> f64 {
    9.0
}
fn d_test2_mult() -> f64 {
    3.0
}
fn d_sharpness() -> f64 {
    1e6
}
fn d_verbosity() -> u8 {
    1
}

/// One experiment configuration, as read from a flat TOML file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Action/weight dimension.
    pub dim: usize,
    /// Actions available per round.
    pub num_actions: usize,
    /// Reward noise standard deviation.
    pub noise_std: f64,
    /// Rounds per run.
    pub horizon: u64,
    /// Environment kind: `stationary`, `elevated`, `cosine`, or
    /// `piecewise`. Default `stationary`.
    #[serde(default = "d_env")]
    pub env: String,
    /// For `elevated`: flattened start/end pairs of the elevated round
    /// intervals, e.g. `[50, 100, 350, 400]`.
    #[serde(default)]
    pub intervals: Vec<u64>,
    /// Lower end of the baseline reward range (`elevated` only).
    #[serde(default)]
    pub base_low: f64,
    /// Upper end of the baseline reward range. Default 0.2.
    #[serde(default = "d_base_high")]
    pub base_high: f64,
    /// Lower end of the elevated reward range. Default 0.8.
    #[serde(default = "d_elevated_low")]
    pub elevated_low: f64,
    /// Upper end of the elevated reward range. Default 1.0.
    #[serde(default = "d_elevated_high")]
    pub elevated_high: f64,
    /// Cosine modulation frequency (`cosine` only). Default 0.018.
    #[serde(default = "d_b")]
    pub b: f64,
    /// Rounds at which the weights are redrawn (`piecewise` only).
    #[serde(default)]
    pub change_times: Vec<u64>,
    /// Whether learner-facing rewards are normalized into `[0, 1]`.
    /// Default true.
    #[serde(default = "d_true")]
    pub normalize: bool,
    /// One of [`ALGORITHM_NAMES`].
    pub algorithm: String,
    /// Run count or explicit run-index list.
    pub seeds: Seeds,
    /// LinUCB exploration width. Default 1.
    #[serde(default = "d_one")]
    pub alpha: f64,
    /// LinUCB ridge strength. Default 1.
    #[serde(default = "d_one")]
    pub lambda: f64,
    /// Thompson prior scale. Default 1.
    #[serde(default = "d_one")]
    pub prior_scale: f64,
    /// Thompson observation-noise variance. Default 0.25.
    #[serde(default = "d_quarter")]
    pub ts_noise_var: f64,
    /// Sliding-window length; 0 picks the largest divisor of the horizon
    /// at most `√horizon`. Default 0.
    #[serde(default)]
    pub window: u64,
    /// Exponent of the scheduling rate `ρ(t) = t^exponent`, in
    /// `[-1, 0]`. Default -0.5.
    #[serde(default = "d_rho_exponent")]
    pub rho_exponent: f64,
    /// Multiplier on the window-level stationarity test's slack.
    /// Default 9.
    #[serde(default = "d_test1_mult")]
    pub test1_mult: f64,
    /// Multiplier on the block-level stationarity test's slack.
    /// Default 3.
    #[serde(default = "d_test2_mult")]
    pub test2_mult: f64,
    /// Indicator sharpness of the attention-realized controller.
    /// Default 10⁶.
    #[serde(default = "d_sharpness")]
    pub sharpness: f64,
    /// Master seed (overridden by `--seed` on the command line).
    #[serde(default)]
    pub master_seed: Option<u64>,
    /// Output directory (overridden by `--out`). Default `runs`.
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Worker threads (overridden by `--workers`); 0 means one per core.
    #[serde(default)]
    pub workers: Option<usize>,
    /// 0 = silent, 1 = per-seed summaries, 2 = plus restart rounds.
    /// Default 1.
    #[serde(default = "d_verbosity")]
    pub verbosity: u8,
}

impl RunConfig {
    /// The parsed algorithm selection.
    pub fn algorithm(&self) -> Result<Algorithm> {
        Algorithm::parse(&self.algorithm)
    }

    /// The scheduling rate.
    pub fn rho(&self) -> Result<Rho> {
        Rho::power(self.rho_exponent)
            .map_err(|e| Error::config(format!("`rho_exponent`: {e}")))
    }

    /// Stationarity-test thresholds at this configuration's horizon.
    pub fn tests(&self) -> Result<TestConfig> {
        TestConfig::new(self.rho()?, self.horizon)?
            .with_multipliers(self.test1_mult, self.test2_mult)
            .map_err(|e| Error::config(format!("`test1_mult`/`test2_mult`: {e}")))
    }

    /// The environment specification this configuration describes.
    pub fn env_spec(&self) -> Result<EnvSpec> {
        let variant = match self.env.as_str() {
            "stationary" => EnvVariant::Stationary,
            "elevated" => {
                if self.intervals.is_empty() || self.intervals.len() % 2 != 0 {
                    return Err(Error::config(format!(
                        "`intervals` must hold a non-empty even number of rounds \
                         (start/end pairs), got {} entries",
                        self.intervals.len()
                    )));
                }
                EnvVariant::PiecewiseElevated {
                    intervals: self.intervals.chunks(2).map(|c| (c[0], c[1])).collect(),
                    elevated_range: (self.elevated_low, self.elevated_high),
                    base_range: (self.base_low, self.base_high),
                }
            }
            "cosine" => EnvVariant::CosineModulated { b: self.b },
            "piecewise" => {
                if self.change_times.is_empty() {
                    return Err(Error::config(
                        "`change_times` must list at least one round for env = \"piecewise\"",
                    ));
                }
                EnvVariant::PiecewiseConstant { change_times: self.change_times.clone() }
            }
            other => {
                return Err(Error::config(format!(
                    "`env` must be one of stationary|elevated|cosine|piecewise, got {other:?}"
                )))
            }
        };
        Ok(EnvSpec {
            dim: self.dim,
            num_actions: self.num_actions,
            noise_std: self.noise_std,
            horizon: self.horizon,
            variant,
            normalize: self.normalize,
        })
    }

    /// The sliding-window length to use (resolves `window = 0`).
    pub fn window_len(&self) -> u64 {
        if self.window == 0 {
            auto_window(self.horizon)
        } else {
            self.window
        }
    }
}

/// Largest window length at most `√horizon` that divides the horizon.
pub fn auto_window(horizon: u64) -> u64 {
    let mut w = (horizon as f64).sqrt().floor() as u64;
    while w > 1 && horizon % w != 0 {
        w -= 1;
    }
    w.max(1)
}

/// Loads and parses a TOML configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

/// Settings after command-line flags, config keys, environment, and
/// defaults are merged.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    /// Master seed feeding the per-run derivations.
    pub master_seed: u64,
    /// Output directory.
    pub out: PathBuf,
    /// Worker threads (0 = one per core).
    pub workers: usize,
}

/// Merges flags, config keys, the `NSBANDIT_SEED` environment variable,
/// and defaults. Precedence per key: flag, then config, then environment
/// (seed only), then default.
pub fn resolve(
    cfg: &RunConfig,
    seed: Option<u64>,
    out: Option<PathBuf>,
    workers: Option<usize>,
) -> Result<Resolved> {
    let env_seed = std::env::var(SEED_ENV).ok();
    resolve_with_env(cfg, seed, out, workers, env_seed.as_deref())
}

/// [`resolve`] with the environment variable's value passed explicitly.
pub fn resolve_with_env(
    cfg: &RunConfig,
    seed: Option<u64>,
    out: Option<PathBuf>,
    workers: Option<usize>,
    env_seed: Option<&str>,
) -> Result<Resolved> {
    let master_seed = match (seed, cfg.master_seed, env_seed) {
        (Some(s), _, _) => s,
        (None, Some(s), _) => s,
        (None, None, Some(text)) => text.trim().parse().map_err(|e| {
            Error::config(format!("{SEED_ENV} must be an unsigned integer, got {text:?}: {e}"))
        })?,
        (None, None, None) => 0,
    };
    Ok(Resolved {
        master_seed,
        out: out.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("runs")),
        workers: workers.or(cfg.workers).unwrap_or(0),
    })
}

/// Runs one seed of the configured algorithm and returns its trace.
pub fn run_trace(cfg: &RunConfig, derivation: &SeedDerivation) -> Result<Vec<RoundLog>> {
    let env = LinearBanditEnv::sample(cfg.env_spec()?, *derivation)?;
    let linucb = || LinUcb::new(cfg.dim, cfg.alpha, cfg.lambda);
    let thompson = || LinearThompson::new(cfg.dim, cfg.prior_scale, cfg.ts_noise_var);
    match cfg.algorithm()? {
        Algorithm::LinUcb => policy_run(&env, derivation, &mut linucb()?),
        Algorithm::Thompson => policy_run(&env, derivation, &mut thompson()?),
        Algorithm::MasterLinUcb => {
            master_run(&env, derivation, &MasterOptions::new(cfg.tests()?), &linucb()?)
        }
        Algorithm::MasterThompson => {
            master_run(&env, derivation, &MasterOptions::new(cfg.tests()?), &thompson()?)
        }
        Algorithm::NctfLinUcb => {
            let mut nctf_cfg = NctfConfig::new(cfg.tests()?);
            nctf_cfg.k = cfg.sharpness;
            nctf_cfg.k2 = cfg.sharpness;
            nctf_rollout(&env, derivation, &nctf_cfg, &linucb()?)
        }
        Algorithm::SlidingWindowLinUcb => {
            sliding_window_run(&env, derivation, cfg.window_len(), &linucb()?)
        }
    }
}

/// Runs every seed of the configuration on a worker pool, returning
/// per-seed records in seed order.
pub fn execute_runs(
    cfg: &RunConfig,
    master_seed: u64,
    workers: usize,
) -> Result<Vec<Vec<RunRecord>>> {
    let indices = cfg.seeds.indices()?;
    cfg.algorithm()?; // surface configuration errors before spawning
    let root = SeedDerivation::new(master_seed);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Internal(format!("worker pool: {e}")))?;
    pool.install(|| {
        indices
            .par_iter()
            .map(|&i| run_trace(cfg, &root.run(i)).map(|logs| records_from_logs(i, &logs)))
            .collect()
    })
}

/// `run` subcommand: all seeds, one CSV per seed plus the aggregate.
pub fn cmd_run(
    config_path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    workers: Option<usize>,
) -> Result<()> {
    let cfg = load_config(config_path)?;
    let resolved = resolve(&cfg, seed, out, workers)?;
    let runs = execute_runs(&cfg, resolved.master_seed, resolved.workers)?;
    std::fs::create_dir_all(&resolved.out).map_err(|e| Error::io(resolved.out.clone(), e))?;
    for run in &runs {
        write_records_csv(run, &resolved.out.join(format!("run_{}.csv", run[0].seed)))?;
    }
    write_curve_csv(&aggregate(&runs)?, &resolved.out.join("aggregate.csv"))?;
    if cfg.verbosity >= 1 {
        for run in &runs {
            let restarts: Vec<u64> = run.iter().filter(|r| r.restart).map(|r| r.t).collect();
            println!(
                "seed {}: dynamic regret {:.4}, {} restart(s)",
                run[0].seed,
                dynamic_regret(run)?,
                restarts.len()
            );
            if cfg.verbosity >= 2 && !restarts.is_empty() {
                println!("  restart rounds: {restarts:?}");
            }
        }
        println!(
            "wrote {} run file(s) and aggregate.csv to {}",
            runs.len(),
            resolved.out.display()
        );
    }
    Ok(())
}

/// The axis a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Horizon `T`.
    Horizon,
    /// Cosine modulation frequency `b` (grid-restricted).
    CosineFrequency,
    /// Elevation gap added to the baseline range.
    Elevation,
}

impl SweepAxis {
    /// Parses an `--axis` value.
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "T" | "horizon" => SweepAxis::Horizon,
            "b" => SweepAxis::CosineFrequency,
            "delta" => SweepAxis::Elevation,
            other => {
                return Err(Error::config(format!(
                    "`--axis` must be one of T|b|delta, got {other:?}"
                )))
            }
        })
    }

    /// Canonical column label.
    pub fn label(&self) -> &'static str {
        match self {
            SweepAxis::Horizon => "T",
            SweepAxis::CosineFrequency => "b",
            SweepAxis::Elevation => "delta",
        }
    }
}

/// The configuration of one sweep cell: the base configuration with the
/// axis value applied.
pub fn apply_axis(cfg: &RunConfig, axis: SweepAxis, raw: &str) -> Result<(f64, RunConfig)> {
    let mut cell = cfg.clone();
    let raw = raw.trim();
    match axis {
        SweepAxis::Horizon => {
            let t: u64 = raw
                .parse()
                .map_err(|e| Error::config(format!("axis T value {raw:?}: {e}")))?;
            if t == 0 {
                return Err(Error::config("axis T values must be at least 1"));
            }
            cell.horizon = t;
            Ok((t as f64, cell))
        }
        SweepAxis::CosineFrequency => {
            let b: f64 = raw
                .parse()
                .map_err(|e| Error::config(format!("axis b value {raw:?}: {e}")))?;
            if !COSINE_B_GRID.contains(&b) {
                return Err(Error::config(format!(
                    "axis b value {b} is outside the supported grid {{0.018, 0.025}}"
                )));
            }
            cell.env = "cosine".into();
            cell.b = b;
            Ok((b, cell))
        }
        SweepAxis::Elevation => {
            let delta: f64 = raw
                .parse()
                .map_err(|e| Error::config(format!("axis delta value {raw:?}: {e}")))?;
            if !(delta >= 0.0) {
                return Err(Error::config("axis delta values must be non-negative"));
            }
            if cell.intervals.is_empty() {
                return Err(Error::config(
                    "axis delta requires `intervals` in the configuration",
                ));
            }
            cell.env = "elevated".into();
            cell.elevated_low = cell.base_low + delta;
            cell.elevated_high = cell.base_high + delta;
            Ok((delta, cell))
        }
    }
}

/// `sweep` subcommand: one summary row per axis value, plus a power-law
/// fit of final regret against the axis when three or more strictly
/// positive cells are available.
pub fn cmd_sweep(
    config_path: &Path,
    axis_name: &str,
    values: &[String],
    seed: Option<u64>,
    out: Option<PathBuf>,
    workers: Option<usize>,
) -> Result<()> {
    let cfg = load_config(config_path)?;
    let axis = SweepAxis::parse(axis_name)?;
    if values.is_empty() {
        return Err(Error::config("`--values` must list at least one axis value"));
    }
    let resolved = resolve(&cfg, seed, out, workers)?;
    let mut cells = Vec::with_capacity(values.len());
    for raw in values {
        let (value, cell_cfg) = apply_axis(&cfg, axis, raw)?;
        let runs = execute_runs(&cell_cfg, resolved.master_seed, resolved.workers)?;
        let curve = aggregate(&runs)?;
        let last = curve.regret_mean.len() - 1;
        cells.push((value, curve.regret_mean[last], curve.regret_std[last], curve.n_seeds));
    }
    let xs: Vec<f64> = cells.iter().map(|c| c.0).collect();
    let ys: Vec<f64> = cells.iter().map(|c| c.1).collect();
    let fit = if cells.len() >= 3 && xs.iter().chain(&ys).all(|&v| v > 0.0) {
        slope_fit(&xs, &ys).ok()
    } else {
        None
    };
    let (slope, intercept, r2) = fit.unwrap_or((f64::NAN, f64::NAN, f64::NAN));
    std::fs::create_dir_all(&resolved.out).map_err(|e| Error::io(resolved.out.clone(), e))?;
    let rows: Vec<String> = cells
        .iter()
        .map(|(value, mean, std, n)| {
            format!(
                "{},{value:.16e},{mean:.16e},{std:.16e},{n},{slope:.16e},{intercept:.16e},{r2:.16e}",
                axis.label()
            )
        })
        .collect();
    atomic_write_csv(&resolved.out.join("sweep.csv"), SWEEP_HEADER, &rows)?;
    if cfg.verbosity >= 1 {
        for (value, mean, std, n) in &cells {
            println!(
                "{} = {value}: final regret {mean:.4} (std {std:.4}, {n} seed(s))",
                axis.label()
            );
        }
        if fit.is_some() {
            println!("log-log fit: slope {slope:.4}, intercept {intercept:.4}, r2 {r2:.4}");
        }
        println!("wrote sweep.csv to {}", resolved.out.display());
    }
    Ok(())
}

/// Column order of the sweep summary CSV.
pub const SWEEP_HEADER: &str =
    "axis,value,regret_mean_final,regret_std_final,n_seeds,slope,intercept,r2";

/// Fault injections for exercising the verification suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Injection {
    /// Invert the window-level stationarity test inside the controller.
    FlipTest1,
    /// Run the rank-computation accuracy check at sharpness 10.
    BluntCdf,
}

impl Injection {
    /// Parses an `--inject` value.
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "flip-test1" => Injection::FlipTest1,
            "blunt-cdf" => Injection::BluntCdf,
            other => {
                return Err(Error::config(format!(
                    "`--inject` must be flip-test1 or blunt-cdf, got {other:?}"
                )))
            }
        })
    }
}

/// One verification check's outcome: `Err` carries the failure detail.
pub type CheckOutcome = (String, std::result::Result<(), String>);

fn outcome(name: &str, result: Result<()>) -> CheckOutcome {
    (name.to_string(), result.map_err(|e| e.to_string()))
}

fn check_scheduler_invariants(rho: &Rho) -> Result<()> {
    for seed in 0..4u64 {
        for top in [3u32, 5] {
            let len = 1usize << top;
            let mut rng = SeedDerivation::new(900 + seed).stream(StreamKind::Schedule, top as u64);
            let coins: Vec<Vec<f64>> = (0..=top)
                .map(|i| (0..(len >> i)).map(|_| unit_uniform(&mut rng)).collect())
                .collect();
            let mut table = TableRand::new(coins.clone());
            let masks = sigma1(top, rho, &mut table)?;
            if !masks[top as usize].scheduled.iter().all(|&s| s) {
                return Err(Error::Contract("top order not always scheduled".into()));
            }
            for (i, mask) in masks.iter().enumerate() {
                let prob = rho.schedule_prob(i as u32, top);
                for (idx, &s) in mask.scheduled.iter().enumerate() {
                    if s != (coins[i][idx] < prob) {
                        return Err(Error::Contract(format!(
                            "schedule draw disagrees with its coin at order {i}, window {idx}"
                        )));
                    }
                }
            }
            let trajectory: Vec<Triple> = (0..len)
                .map(|i| Triple { state: i as u64, action: i, reward: 0.0 })
                .collect();
            let selected = ws(&trajectory, &masks)?;
            for tau in 1..=len as u64 {
                let active = sigma2(&masks, tau)?;
                if !masks[active as usize].is_scheduled_at(tau) {
                    return Err(Error::Contract(format!("inactive order selected at {tau}")));
                }
                for lower in 0..active {
                    if masks[lower as usize].is_scheduled_at(tau) {
                        return Err(Error::Contract(format!(
                            "a live lower order was skipped at round {tau}"
                        )));
                    }
                }
                let owners = (0..=top as usize)
                    .filter(|&o| selected[o][tau as usize - 1].is_some())
                    .count();
                if owners != 1 {
                    return Err(Error::Contract(format!(
                        "round {tau} assigned to {owners} orders"
                    )));
                }
            }
        }
    }
    Ok(())
}

fn check_test_thresholds(tests: &TestConfig) -> Result<()> {
    let horizon = tests.horizon as f64;
    let scale = 6.0 * (horizon.log2() + 1.0) * horizon.ln();
    for order in [0u32, 2, 5] {
        let rho_hat = scale * tests.rho.eval(1u64 << order);
        for u in [0.0, 0.3, 1.0] {
            let edge = u + tests.test1_mult * rho_hat;
            for window_mean in [0.0, edge - 1e-9, edge, edge + 1e-9] {
                let expect = window_mean >= edge;
                if test1_fails(window_mean, u, order, tests) != expect {
                    return Err(Error::Contract(format!(
                        "window test disagrees with its formula at mean {window_mean}, \
                         floor {u}, order {order}"
                    )));
                }
            }
        }
    }
    for elapsed in [1u64, 7, 64] {
        let edge = tests.test2_mult * scale * tests.rho.eval(elapsed);
        for gap_mean in [0.0, edge - 1e-9, edge, edge + 1e-9] {
            let expect = gap_mean >= edge;
            if test2_fails(gap_mean, elapsed, tests) != expect {
                return Err(Error::Contract(format!(
                    "block test disagrees with its formula at gap {gap_mean}, \
                     elapsed {elapsed}"
                )));
            }
        }
    }
    Ok(())
}

/// Stationary fixture shared by the run-level checks: the configured
/// environment dimensions with drift removed, at a short horizon and the
/// default test thresholds.
fn fixture_trace(cfg: &RunConfig, horizon: u64, flip: bool) -> Result<Vec<RoundLog>> {
    let spec = EnvSpec {
        dim: cfg.dim,
        num_actions: cfg.num_actions,
        noise_std: cfg.noise_std,
        horizon,
        variant: EnvVariant::Stationary,
        normalize: true,
    };
    let derivation = SeedDerivation::new(0x5645_5249_4659);
    let env = LinearBanditEnv::sample(spec, derivation)?;
    let tests = TestConfig::new(cfg.rho()?, horizon)?;
    let mut opts = MasterOptions::new(tests);
    opts.flip_test1_sign = flip;
    master_run(&env, &derivation, &opts, &LinUcb::new(cfg.dim, cfg.alpha, cfg.lambda)?)
}

fn check_stationary_no_restart(cfg: &RunConfig, flip: bool) -> Result<()> {
    let logs = fixture_trace(cfg, 128, flip)?;
    let restarts = logs.iter().filter(|l| l.restart).count();
    if restarts > 0 {
        return Err(Error::Contract(format!(
            "{restarts} restart(s) on stationary data at default thresholds"
        )));
    }
    Ok(())
}

fn check_restart_replay(cfg: &RunConfig) -> Result<()> {
    let spec = EnvSpec {
        dim: cfg.dim,
        num_actions: cfg.num_actions,
        noise_std: cfg.noise_std,
        horizon: 32,
        variant: EnvVariant::Stationary,
        normalize: true,
    };
    let derivation = SeedDerivation::new(0x5245_504c_4159);
    let env = LinearBanditEnv::sample(spec, derivation)?;
    let tests = TestConfig::new(cfg.rho()?, 32)?;
    let mut opts = MasterOptions::new(tests);
    opts.force_restart_at = Some(12);
    let full = master_run(&env, &derivation, &opts, &LinUcb::new(cfg.dim, cfg.alpha, cfg.lambda)?)?;
    if !full[11].restart {
        return Err(Error::Contract("forced restart did not register".into()));
    }
    let tail = master_run_from(
        &env,
        &derivation,
        &MasterOptions::new(tests),
        &LinUcb::new(cfg.dim, cfg.alpha, cfg.lambda)?,
        13,
    )?;
    if full[12..] != tail[..] {
        return Err(Error::Contract(
            "post-restart trace differs from a fresh start at the same round".into(),
        ));
    }
    Ok(())
}

fn check_regret_nonnegative(cfg: &RunConfig) -> Result<()> {
    let logs = fixture_trace(cfg, 64, false)?;
    let records = records_from_logs(0, &logs);
    for r in &records {
        if r.regret_inst < -1e-12 {
            return Err(Error::Contract(format!(
                "negative instantaneous regret {} at round {}",
                r.regret_inst, r.t
            )));
        }
    }
    dynamic_regret(&records).map(|_| ())
}

fn check_cdf_accuracy(k: f64) -> Result<()> {
    let top = 8u32;
    let len = 1usize << top;
    let layout = TokenLayout::new(1, top)?;
    let mut rng = SeedDerivation::new(0x4344_465f).stream(StreamKind::Bench, 0);
    // Jittered quarter-band grid: tie-free with minimum gap 1/2048, so
    // any sharpness above ~2¹¹ resolves every pair exactly; blunter
    // indicators leave a measurable rank deviation.
    let inputs: Vec<f64> =
        (0..len).map(|i| 0.25 * (i as f64 + 0.5 * unit_uniform(&mut rng)) / len as f64).collect();
    let mut shuffled = inputs;
    shuffled.sort_by(|a, b| {
        (a * 7919.0).fract().partial_cmp(&(b * 7919.0).fract()).expect("finite")
    });
    let mut tokens: Vec<DVector<f64>> = (0..len)
        .map(|idx| {
            let mut token = layout.new_token();
            for i in 0..=top {
                let window = 1usize << i;
                token[layout.carrier_slot(i)] = shuffled[(idx / window) * window];
            }
            token[layout.t_slot()] = (idx + 1) as f64;
            token
        })
        .collect();
    let values = cdf_attention(&mut tokens, &layout, k)?;
    let mut max_dev = 0.0f64;
    for (idx, &v) in values.iter().enumerate() {
        let rank = shuffled.iter().filter(|&&z| z < shuffled[idx]).count();
        max_dev = max_dev.max((v - rank as f64 / len as f64).abs());
    }
    if max_dev > 1.0 / k {
        return Err(Error::Contract(format!(
            "rank deviation {max_dev:.3e} exceeds 1/k = {:.3e}",
            1.0 / k
        )));
    }
    Ok(())
}

fn check_gate_pipeline(rho: &Rho) -> Result<()> {
    for seed in 0..2u64 {
        for top in [2u32, 3] {
            let layout = TokenLayout::new(2, top)?;
            let net =
                build_scheduler_net(layout, *rho, 1e6, 1e6, 1e-5, 2.0, 0.5, DEFAULT_COIN_TILT)?;
            let len = 1usize << top;
            let mut rng =
                SeedDerivation::new(7000 + seed).stream(StreamKind::Carrier, top as u64);
            let carriers: Vec<f64> = (0..len).map(|_| unit_uniform(&mut rng)).collect();
            let mut tokens: Vec<DVector<f64>> = (0..len)
                .map(|idx| {
                    let mut token = layout.new_token();
                    for i in 0..=top {
                        let window = 1usize << i;
                        token[layout.carrier_slot(i)] = carriers[(idx / window) * window];
                    }
                    token[layout.t_slot()] = (idx + 1) as f64;
                    token
                })
                .collect();
            let decisions = run_gate_pipeline(&net, &mut tokens)?;
            let mut table = TableRand::new(reference_coins(&carriers, top, 1e6, DEFAULT_COIN_TILT));
            let masks = sigma1(top, rho, &mut table)?;
            for (i, mask) in masks.iter().enumerate() {
                if decisions.masks[i].scheduled != mask.scheduled {
                    return Err(Error::Contract(format!(
                        "gate masks diverge at order {i} (seed {seed}, top {top})"
                    )));
                }
            }
            for idx in 0..len {
                if decisions.active[idx] != sigma2(&masks, idx as u64 + 1)? {
                    return Err(Error::Contract(format!(
                        "acting order diverges at round {} (seed {seed}, top {top})",
                        idx + 1
                    )));
                }
            }
        }
    }
    Ok(())
}

fn check_csv_round_trip() -> Result<()> {
    let dir = tempfile::tempdir().map_err(|e| Error::io("tempdir", e))?;
    let path = dir.path().join("verify.csv");
    let mut rng = SeedDerivation::new(0x4353_565f).stream(StreamKind::Bench, 1);
    let mut cum = 0.0;
    let records: Vec<RunRecord> = (1..=5u64)
        .map(|t| {
            let inst = unit_uniform(&mut rng);
            cum += inst;
            RunRecord {
                seed: 3,
                t,
                active_order: (t % 3) as u32,
                action: t as usize % 2,
                reward_raw: unit_uniform(&mut rng) * 2.0 - 1.0,
                reward_norm: unit_uniform(&mut rng),
                r_tilde: unit_uniform(&mut rng),
                u_t: unit_uniform(&mut rng),
                r_star: unit_uniform(&mut rng),
                regret_inst: inst,
                regret_cum: cum,
                restart: t == 4,
                test1: false,
                test2: t == 4,
            }
        })
        .collect();
    write_records_csv(&records, &path)?;
    let back = read_records_csv(&path)?;
    if back.len() != records.len() {
        return Err(Error::Contract("row count changed across the round trip".into()));
    }
    for (a, b) in records.iter().zip(&back) {
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-15 * x.abs().max(1.0);
        if a.seed != b.seed
            || a.t != b.t
            || a.active_order != b.active_order
            || a.action != b.action
            || a.restart != b.restart
            || a.test1 != b.test1
            || a.test2 != b.test2
            || !close(a.reward_raw, b.reward_raw)
            || !close(a.reward_norm, b.reward_norm)
            || !close(a.r_tilde, b.r_tilde)
            || !close(a.u_t, b.u_t)
            || !close(a.r_star, b.r_star)
            || !close(a.regret_inst, b.regret_inst)
            || !close(a.regret_cum, b.regret_cum)
        {
            return Err(Error::Contract(format!("row {} changed across the round trip", a.t)));
        }
    }
    Ok(())
}

fn check_aggregate_consistency() -> Result<()> {
    let mut cum = 0.0;
    let run: Vec<RunRecord> = (1..=6u64)
        .map(|t| {
            cum += 0.25;
            RunRecord {
                seed: 0,
                t,
                active_order: 0,
                action: 0,
                reward_raw: 0.5,
                reward_norm: 0.5,
                r_tilde: 0.5,
                u_t: 0.5,
                r_star: 0.75,
                regret_inst: 0.25,
                regret_cum: cum,
                restart: false,
                test1: false,
                test2: false,
            }
        })
        .collect();
    let copies = aggregate(&vec![run.clone(); 3])?;
    for (i, (&mean, &std)) in copies.regret_mean.iter().zip(&copies.regret_std).enumerate() {
        if (mean - run[i].regret_cum).abs() > 1e-12 || std != 0.0 {
            return Err(Error::Contract(
                "aggregating identical runs changed the mean or produced spread".into(),
            ));
        }
    }
    let mut shifted = run.clone();
    for r in &mut shifted {
        r.regret_cum += 1.0;
    }
    let two = aggregate(&[run, shifted])?;
    if two.regret_std.iter().any(|&s| (s - 0.5).abs() > 1e-12) {
        return Err(Error::Contract("two runs one apart must have spread 1/2".into()));
    }
    Ok(())
}

/// Runs the verification suite, returning one outcome per check. The
/// optional injection plants a known fault; the corresponding check must
/// then fail.
pub fn verify_checks(cfg: &RunConfig, inject: Option<Injection>) -> Result<Vec<CheckOutcome>> {
    let rho = cfg.rho()?;
    let tests = cfg.tests()?;
    let flip = inject == Some(Injection::FlipTest1);
    let cdf_k = if inject == Some(Injection::BluntCdf) { 10.0 } else { cfg.sharpness };
    Ok(vec![
        outcome("schedule-draws-match-their-coins", check_scheduler_invariants(&rho)),
        outcome("test-thresholds-match-their-formulas", check_test_thresholds(&tests)),
        outcome("stationary-run-never-restarts", check_stationary_no_restart(cfg, flip)),
        outcome("restart-replay-is-exact", check_restart_replay(cfg)),
        outcome("regret-is-nonnegative", check_regret_nonnegative(cfg)),
        outcome("cdf-rank-accuracy", check_cdf_accuracy(cdf_k)),
        outcome("gate-pipeline-matches-scheduler", check_gate_pipeline(&rho)),
        outcome("csv-round-trip", check_csv_round_trip()),
        outcome("aggregate-consistency", check_aggregate_consistency()),
    ])
}

/// `verify` subcommand: prints the pass/fail table and returns whether
/// every check passed.
pub fn cmd_verify(config_path: &Path, inject_name: Option<&str>) -> Result<bool> {
    let cfg = load_config(config_path)?;
    let inject = inject_name.map(Injection::parse).transpose()?;
    let checks = verify_checks(&cfg, inject)?;
    println!("{:<44} RESULT", "CHECK");
    let mut all = true;
    for (name, result) in &checks {
        match result {
            Ok(()) => println!("{name:<44} pass"),
            Err(why) => {
                all = false;
                println!("{name:<44} FAIL  {why}");
            }
        }
    }
    let failed = checks.iter().filter(|(_, r)| r.is_err()).count();
    if failed == 0 {
        println!("all {} checks passed", checks.len());
    } else {
        println!("{failed} of {} checks FAILED", checks.len());
    }
    Ok(all)
}

/// Benchmark harness for non-stationary linear bandits.
#[derive(Debug, Parser)]
#[command(name = "nsbandit", version, about)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one configuration across seeds, writing per-seed and
    /// aggregate CSVs.
    Run {
        /// TOML configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Master seed (overrides the config key and NSBANDIT_SEED).
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides the config key).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads, 0 = one per core (overrides the config key).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Re-run the configuration across one axis and write a summary CSV.
    Sweep {
        /// TOML configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Swept axis: T (horizon), b (cosine frequency), or delta
        /// (elevation gap).
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Master seed (overrides the config key and NSBANDIT_SEED).
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides the config key).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads, 0 = one per core (overrides the config key).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run the self-verification suite and print a pass/fail table.
    Verify {
        /// TOML configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Plant a known fault (flip-test1 or blunt-cdf); the matching
        /// check must then fail.
        #[arg(long)]
        inject: Option<String>,
    },
}

/// Parses arguments, dispatches, and returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Run { config, seed, out, workers } => {
            cmd_run(&config, seed, out, workers).map(|()| 0)
        }
        Command::Sweep { config, axis, values, seed, out, workers } => {
            cmd_sweep(&config, &axis, &values, seed, out, workers).map(|()| 0)
        }
        Command::Verify { config, inject } => {
            cmd_verify(&config, inject.as_deref()).map(|ok| if ok { 0 } else { 1 })
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
