//! Dynamic-regret evaluation, diagnostics, aggregation, and CSV output.
//!
//! Per-round traces become [`RunRecord`] rows (one CSV line each, schema
//! pinned in [`RECORDS_HEADER`]). Regret is computed against the
//! noise-free expected reward of the chosen action, so single-seed
//! curves carry no reward-noise variance. [`aggregate`] folds many
//! seeds' cumulative-regret curves into a mean/standard-deviation
//! summary, [`slope_fit`] fits log-log regret rates across horizons,
//! [`distribution_ratio_estimate`] Monte-Carlo-estimates the likelihood
//! ratio between two policies in log space, and [`assumption1_report`]
//! evaluates the reward-estimate assumptions and their proviso on a
//! recorded trace. CSV writes are atomic (temp file + rename) with
//! floats at 17 significant digits for exact round-trips.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::base_algs::Policy;
use crate::envs::LinearBanditEnv;
use crate::error::Error;
use crate::master::{select_from, RoundLog};
use crate::rng::unit_uniform;
use crate::scheduler::Rho;
use crate::Result;

/// Column order of the per-run CSV.
pub const RECORDS_HEADER: &str =
    "seed,t,active_order,action,reward_raw,reward_norm,r_tilde,u_t,r_star,\
     regret_inst,regret_cum,restart,test1,test2";

/// Column order of the aggregate CSV.
pub const CURVE_HEADER: &str = "t,regret_mean,regret_std,n_seeds";

/// One round of one run, as serialized to CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    /// Run seed (index into the seed expansion).
    pub seed: u64,
    /// Global round, 1-indexed.
    pub t: u64,
    /// Order of the window that acted (0 for plain baselines).
    pub active_order: u32,
    /// Chosen action index.
    pub action: usize,
    /// Realized raw reward.
    pub reward_raw: f64,
    /// Realized normalized reward.
    pub reward_norm: f64,
    /// The acting learner's performance estimate.
    pub r_tilde: f64,
    /// Running minimum of the estimates.
    pub u_t: f64,
    /// Best expected reward over the round's action set.
    pub r_star: f64,
    /// Instantaneous expected regret `r* − E[r | a]`.
    pub regret_inst: f64,
    /// Cumulative expected regret through this round.
    pub regret_cum: f64,
    /// Whether the controller restarted at the end of this round.
    pub restart: bool,
    /// Test 1 outcome.
    pub test1: bool,
    /// Test 2 outcome.
    pub test2: bool,
}

/// Converts a controller trace into records, accumulating regret.
pub fn records_from_logs(seed: u64, logs: &[RoundLog]) -> Vec<RunRecord> {
    let mut cum = 0.0;
    logs.iter()
        .map(|log| {
            let inst = log.r_star - log.mean_chosen;
            cum += inst;
            RunRecord {
                seed,
                t: log.t,
                active_order: log.active_order,
                action: log.action,
                reward_raw: log.reward_raw,
                reward_norm: log.reward_norm,
                r_tilde: log.r_tilde,
                u_t: log.u_t,
                r_star: log.r_star,
                regret_inst: inst,
                regret_cum: cum,
                restart: log.restart,
                test1: log.test1_fail,
                test2: log.test2_fail,
            }
        })
        .collect()
}

fn check_contiguous(records: &[RunRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Contract("empty trace".into()));
    }
    for (i, r) in records.iter().enumerate() {
        if r.t != records[0].t + i as u64 {
            return Err(Error::Contract(format!(
                "trace rounds not contiguous: expected t = {}, found {}",
                records[0].t + i as u64,
                r.t
            )));
        }
    }
    Ok(())
}

/// Total dynamic regret of a complete trace: `Σ_t (r*_t − E[r_t | a_t])`,
/// using expected (noise-free) rewards of the chosen actions.
pub fn dynamic_regret(records: &[RunRecord]) -> Result<f64> {
    check_contiguous(records)?;
    Ok(records.iter().map(|r| r.regret_inst).sum())
}

/// Per-trajectory likelihood ratios `Π_t alg1(a_t)/alg2(a_t)` for
/// trajectories drawn under `alg1`, accumulated in log space. A
/// trajectory where `alg2` assigns probability zero to a realized action
/// yields `+∞` (with a diagnostic on stderr).
pub fn distribution_ratio_samples<P1, P2>(
    alg1: &P1,
    alg2: &P2,
    env: &LinearBanditEnv,
    trajectories: u64,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<f64>>
where
    P1: Policy + Clone,
    P2: Policy + Clone,
{
    if trajectories == 0 {
        return Err(Error::domain("need at least one trajectory"));
    }
    let noise = Normal::new(0.0, env.spec().noise_std)
        .map_err(|e| Error::config(format!("invalid noise distribution: {e}")))?;
    let mut samples = Vec::with_capacity(trajectories as usize);
    for _ in 0..trajectories {
        let mut a1 = alg1.clone();
        let mut a2 = alg2.clone();
        a1.reset();
        a2.reset();
        let mut log_ratio = 0.0f64;
        let mut diverged = false;
        for t in 1..=env.spec().horizon {
            let actions = env.draw_action_set(t)?;
            let (d1, _) = a1.act(&actions, rng)?;
            let (d2, _) = a2.act(&actions, rng)?;
            let choice = select_from(&d1, unit_uniform(rng));
            let p1 = d1[choice];
            let p2 = d2[choice];
            if p2 <= 0.0 {
                eprintln!(
                    "distribution ratio diverged: round {t} action {choice} has \
                     probability {p1} under alg1 but {p2} under alg2"
                );
                diverged = true;
                break;
            }
            log_ratio += p1.ln() - p2.ln();
            let reward =
                env.mean_reward(t, &actions[choice]) + noise.sample(rng);
            let reward_norm = env.normalize_reward(reward);
            a1.update(&actions[choice], reward_norm);
            a2.update(&actions[choice], reward_norm);
        }
        samples.push(if diverged { f64::INFINITY } else { log_ratio.exp() });
    }
    Ok(samples)
}

/// Monte Carlo estimate of the distribution ratio: the mean of
/// [`distribution_ratio_samples`].
pub fn distribution_ratio_estimate<P1, P2>(
    alg1: &P1,
    alg2: &P2,
    env: &LinearBanditEnv,
    trajectories: u64,
    rng: &mut ChaCha12Rng,
) -> Result<f64>
where
    P1: Policy + Clone,
    P2: Policy + Clone,
{
    let samples = distribution_ratio_samples(alg1, alg2, env, trajectories, rng)?;
    Ok(samples.iter().sum::<f64>() / samples.len() as f64)
}

/// Per-round outcomes of the reward-estimate assumptions on a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    /// Rounds violating `r̃_t ≥ min_{τ≤t} r*_τ − Δ_[1,t]` (normalized
    /// scale).
    pub estimate_violations: Vec<bool>,
    /// Rounds violating `(1/t)·Σ_{τ≤t}(r̃_τ − r_τ) ≤ ρ(t) + Δ_[1,t]`.
    pub gap_violations: Vec<bool>,
    /// Rounds where the proviso `Δ_[1,t] ≤ ρ(t)` fails.
    pub proviso_delta_violations: Vec<bool>,
    /// Rounds where the proviso `ρ(t) ≥ 1/√t` fails.
    pub proviso_rho_violations: Vec<bool>,
}

impl AssumptionReport {
    fn fraction(flags: &[bool]) -> f64 {
        flags.iter().filter(|&&b| b).count() as f64 / flags.len().max(1) as f64
    }

    /// Violating fractions, in the order (estimate, gap, proviso-Δ,
    /// proviso-ρ).
    pub fn fractions(&self) -> (f64, f64, f64, f64) {
        (
            Self::fraction(&self.estimate_violations),
            Self::fraction(&self.gap_violations),
            Self::fraction(&self.proviso_delta_violations),
            Self::fraction(&self.proviso_rho_violations),
        )
    }

    /// True when no round violates anything.
    pub fn clean(&self) -> bool {
        let (a, b, c, d) = self.fractions();
        a == 0.0 && b == 0.0 && c == 0.0 && d == 0.0
    }
}

/// Evaluates the reward-estimate assumptions on a recorded trace.
/// `delta_profile[t−1]` must hold the cumulative drift `Δ_[1,t]`, and
/// `bounds` the environment's normalization bounds (used to place `r*`
/// on the same scale as `r̃`). Comparisons carry a `10⁻¹²` slack so
/// boundary cases (e.g. `ρ(t) = 1/√t` exactly) do not flag.
pub fn assumption1_report(
    records: &[RunRecord],
    rho: &Rho,
    delta_profile: &[f64],
    bounds: (f64, f64),
) -> Result<AssumptionReport> {
    check_contiguous(records)?;
    if records.len() != delta_profile.len() {
        return Err(Error::Contract(format!(
            "delta profile has {} entries for {} rounds",
            delta_profile.len(),
            records.len()
        )));
    }
    let (lo, hi) = bounds;
    if !(hi > lo) {
        return Err(Error::config(format!("normalization bounds ({lo}, {hi}) are degenerate")));
    }
    const SLACK: f64 = 1e-12;
    let mut report = AssumptionReport {
        estimate_violations: Vec::with_capacity(records.len()),
        gap_violations: Vec::with_capacity(records.len()),
        proviso_delta_violations: Vec::with_capacity(records.len()),
        proviso_rho_violations: Vec::with_capacity(records.len()),
    };
    let mut min_star = f64::INFINITY;
    let mut gap_sum = 0.0;
    for (i, r) in records.iter().enumerate() {
        let t = i as u64 + 1;
        let star_norm = ((r.r_star - lo) / (hi - lo)).clamp(0.0, 1.0);
        min_star = min_star.min(star_norm);
        let delta = delta_profile[i];
        let rho_t = rho.eval(t);
        report
            .estimate_violations
            .push(r.r_tilde < min_star - delta - SLACK);
        gap_sum += r.r_tilde - r.reward_norm;
        report
            .gap_violations
            .push(gap_sum / t as f64 > rho_t + delta + SLACK);
        report.proviso_delta_violations.push(delta > rho_t + SLACK);
        report
            .proviso_rho_violations
            .push(rho_t < 1.0 / (t as f64).sqrt() - SLACK);
    }
    Ok(report)
}

/// Least-squares fit of `log regret` against `log horizon`:
/// `(slope, intercept, r²)`. Requires at least three strictly positive
/// pairs.
pub fn slope_fit(horizons: &[f64], regrets: &[f64]) -> Result<(f64, f64, f64)> {
    if horizons.len() != regrets.len() || horizons.len() < 3 {
        return Err(Error::domain(format!(
            "slope fit needs >= 3 matched pairs, got {} horizons and {} regrets",
            horizons.len(),
            regrets.len()
        )));
    }
    if horizons.iter().chain(regrets).any(|&v| v <= 0.0) {
        return Err(Error::domain("slope fit requires strictly positive values"));
    }
    let xs: Vec<f64> = horizons.iter().map(|&t| t.ln()).collect();
    let ys: Vec<f64> = regrets.iter().map(|&r| r.ln()).collect();
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mean_x) * (x - mean_x)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mean_x) * (y - mean_y)).sum();
    if sxx == 0.0 {
        return Err(Error::domain("slope fit needs at least two distinct horizons"));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean_y) * (y - mean_y)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok((slope, intercept, r2))
}

/// Mean and standard deviation of cumulative regret across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateCurve {
    /// Rounds, shared across seeds.
    pub t: Vec<u64>,
    /// Mean cumulative regret per round.
    pub regret_mean: Vec<f64>,
    /// Population standard deviation per round.
    pub regret_std: Vec<f64>,
    /// Number of seeds aggregated.
    pub n_seeds: usize,
}

/// Folds per-seed record vectors into an [`AggregateCurve`]. All runs
/// must cover the same rounds.
pub fn aggregate(runs: &[Vec<RunRecord>]) -> Result<AggregateCurve> {
    let first = runs.first().ok_or_else(|| Error::Contract("no runs to aggregate".into()))?;
    check_contiguous(first)?;
    let rounds: Vec<u64> = first.iter().map(|r| r.t).collect();
    for run in runs {
        check_contiguous(run)?;
        if run.len() != first.len() || run[0].t != first[0].t {
            return Err(Error::Contract("runs cover different rounds".into()));
        }
    }
    let n = runs.len() as f64;
    let mut mean = vec![0.0; first.len()];
    let mut std = vec![0.0; first.len()];
    for (i, (m, s)) in mean.iter_mut().zip(std.iter_mut()).enumerate() {
        let values: Vec<f64> = runs.iter().map(|run| run[i].regret_cum).collect();
        let mu = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        *m = mu;
        *s = var.sqrt();
    }
    Ok(AggregateCurve { t: rounds, regret_mean: mean, regret_std: std, n_seeds: runs.len() })
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_bool(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

/// Atomically writes `header` plus `rows` to `path` (temp file in the
/// same directory, then rename).
pub(crate) fn atomic_write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    let mut buf = String::with_capacity(rows.len() * 64 + header.len() + 1);
    buf.push_str(header);
    buf.push('\n');
    for row in rows {
        buf.push_str(row);
        buf.push('\n');
    }
    tmp.write_all(buf.as_bytes()).map_err(io_err)?;
    tmp.flush().map_err(io_err)?;
    tmp.persist(path).map_err(|e| Error::io(path.display().to_string(), e.error))?;
    Ok(())
}

/// Writes per-round records as CSV (schema [`RECORDS_HEADER`]), sorted
/// by `(seed, t)` so parallel-run output is order-independent.
pub fn write_records_csv(records: &[RunRecord], path: &Path) -> Result<()> {
    let mut sorted: Vec<&RunRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.seed, r.t));
    let rows: Vec<String> = sorted
        .iter()
        .map(|r| {
            let mut row = String::with_capacity(160);
            write!(
                row,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.seed,
                r.t,
                r.active_order,
                r.action,
                fmt_f64(r.reward_raw),
                fmt_f64(r.reward_norm),
                fmt_f64(r.r_tilde),
                fmt_f64(r.u_t),
                fmt_f64(r.r_star),
                fmt_f64(r.regret_inst),
                fmt_f64(r.regret_cum),
                fmt_bool(r.restart),
                fmt_bool(r.test1),
                fmt_bool(r.test2),
            )
            .expect("string write");
            row
        })
        .collect();
    atomic_write_csv(path, RECORDS_HEADER, &rows)
}

/// Writes an aggregate curve as CSV (schema [`CURVE_HEADER`]).
pub fn write_curve_csv(curve: &AggregateCurve, path: &Path) -> Result<()> {
    let rows: Vec<String> = curve
        .t
        .iter()
        .zip(curve.regret_mean.iter().zip(&curve.regret_std))
        .map(|(t, (mean, std))| {
            format!("{},{},{},{}", t, fmt_f64(*mean), fmt_f64(*std), curve.n_seeds)
        })
        .collect();
    atomic_write_csv(path, CURVE_HEADER, &rows)
}

/// Parses a per-run CSV written by [`write_records_csv`].
pub fn read_records_csv(path: &Path) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == RECORDS_HEADER => {}
        other => {
            return Err(Error::Contract(format!(
                "unexpected CSV header: {:?}",
                other.unwrap_or("")
            )))
        }
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 14 {
            return Err(Error::Contract(format!(
                "line {}: expected 14 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::Contract(format!("line {}: bad float {s:?}: {e}", lineno + 2)))
        };
        let parse_b = |s: &str| -> Result<bool> {
            match s {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(Error::Contract(format!("line {}: bad flag {s:?}", lineno + 2))),
            }
        };
        records.push(RunRecord {
            seed: fields[0]
                .parse()
                .map_err(|e| Error::Contract(format!("line {}: bad seed: {e}", lineno + 2)))?,
            t: fields[1]
                .parse()
                .map_err(|e| Error::Contract(format!("line {}: bad round: {e}", lineno + 2)))?,
            active_order: fields[2]
                .parse()
                .map_err(|e| Error::Contract(format!("line {}: bad order: {e}", lineno + 2)))?,
            action: fields[3]
                .parse()
                .map_err(|e| Error::Contract(format!("line {}: bad action: {e}", lineno + 2)))?,
            reward_raw: parse_f(fields[4])?,
            reward_norm: parse_f(fields[5])?,
            r_tilde: parse_f(fields[6])?,
            u_t: parse_f(fields[7])?,
            r_star: parse_f(fields[8])?,
            regret_inst: parse_f(fields[9])?,
            regret_cum: parse_f(fields[10])?,
            restart: parse_b(fields[11])?,
            test1: parse_b(fields[12])?,
            test2: parse_b(fields[13])?,
        });
    }
    Ok(records)
}
