//! Synthetic linear-bandit environments with controlled non-stationarity.
//!
//! Every environment is a linear bandit over the unit cube: a hidden
//! weight vector `w ~ Unif([0,1]^d)`, per-round action sets of `A` i.i.d.
//! `Unif([0,1]^d)` vectors, and Gaussian reward noise. The variants differ
//! in how the mean-reward function moves over time:
//!
//! * [`EnvVariant::Stationary`] — means are `⟨a, w⟩`, fixed for all rounds.
//! * [`EnvVariant::PiecewiseElevated`] — means are affinely rescaled into a
//!   base range outside the configured intervals and into an elevated range
//!   inside them (abrupt changes at the interval boundaries).
//! * [`EnvVariant::CosineModulated`] — the *noisy* reward is multiplied by
//!   `cos(2π b t)`, producing smooth drift with sign flips.
//! * [`EnvVariant::PiecewiseConstant`] — the weight vector is redrawn at
//!   configured change rounds.
//!
//! Each variant carries a closed form for the per-round drift
//! `delta(t) = max_a |mean(t+1, a) - mean(t, a)|` (the maximum is over the
//! whole unit cube, not just the sampled action set), the interval drift
//! `delta_interval`, and the switch count `jumps_interval`. Learners
//! consume rewards through [`LinearBanditEnv::normalize_reward`], an affine
//! map of the variant's configured reward range onto `[0,1]` followed by
//! clipping; regret is always reported on the raw scale.
//!
//! All draws are keyed by round index (see [`crate::rng`]), so
//! `sample_reward(t, a)` is a pure function of the environment and `(t, a)`
//! and replays exactly from any round.

use nalgebra::DVector;
use rand_distr::{Distribution, Normal};

use crate::error::Error;
use crate::rng::{SeedDerivation, StreamKind};
use crate::Result;

/// How the mean-reward function moves over time.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvVariant {
    /// Fixed means `⟨a, w⟩`.
    Stationary,
    /// Means rescaled into `elevated_range` on the given closed round
    /// intervals and into `base_range` elsewhere.
    PiecewiseElevated {
        /// Closed, 1-indexed, disjoint, sorted round intervals `[start, end]`.
        intervals: Vec<(u64, u64)>,
        /// Reward range inside the intervals.
        elevated_range: (f64, f64),
        /// Reward range outside the intervals.
        base_range: (f64, f64),
    },
    /// Noisy rewards multiplied by `cos(2π b t)`.
    CosineModulated {
        /// Modulation frequency.
        b: f64,
    },
    /// Weight vector redrawn at each change round.
    PiecewiseConstant {
        /// Strictly increasing, 1-indexed rounds at which a new weight
        /// vector takes effect; the first segment starts at round 1.
        change_times: Vec<u64>,
    },
}

/// Full specification of an environment instance.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    /// Action/weight dimension `d`.
    pub dim: usize,
    /// Number of actions per round `A`.
    pub num_actions: usize,
    /// Reward noise standard deviation.
    pub noise_std: f64,
    /// Horizon `T` (rounds are 1-indexed, `1..=T`).
    pub horizon: u64,
    /// Non-stationarity variant.
    pub variant: EnvVariant,
    /// Whether learner-facing rewards are normalized into `[0,1]`.
    pub normalize: bool,
}

impl EnvSpec {
    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("environment dimension must be at least 1"));
        }
        if self.num_actions == 0 {
            return Err(Error::config("environment needs at least one action"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config(format!(
                "noise_std must be non-negative, got {}",
                self.noise_std
            )));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon must be at least 1"));
        }
        match &self.variant {
            EnvVariant::Stationary => {}
            EnvVariant::PiecewiseElevated { intervals, elevated_range, base_range } => {
                for &(lo, hi) in [elevated_range, base_range] {
                    if !(lo < hi) {
                        return Err(Error::config(format!(
                            "reward range must satisfy lo < hi, got [{lo}, {hi}]"
                        )));
                    }
                }
                let mut prev_end = 0u64;
                for &(s, e) in intervals {
                    if s == 0 || s > e || e > self.horizon {
                        return Err(Error::config(format!(
                            "elevated interval [{s}, {e}] is not within [1, {}]",
                            self.horizon
                        )));
                    }
                    if s <= prev_end {
                        return Err(Error::config(
                            "elevated intervals must be sorted and disjoint",
                        ));
                    }
                    prev_end = e;
                }
            }
            EnvVariant::CosineModulated { b } => {
                if !b.is_finite() {
                    return Err(Error::config("cosine frequency b must be finite"));
                }
            }
            EnvVariant::PiecewiseConstant { change_times } => {
                let mut prev = 1u64;
                for &c in change_times {
                    if c <= prev || c > self.horizon {
                        return Err(Error::config(format!(
                            "change time {c} must be strictly increasing within (1, {}]",
                            self.horizon
                        )));
                    }
                    prev = c;
                }
            }
        }
        Ok(())
    }
}

/// A sampled environment instance: the spec plus its hidden weights.
#[derive(Debug, Clone)]
pub struct LinearBanditEnv {
    spec: EnvSpec,
    seeds: SeedDerivation,
    /// One weight vector per segment (a single entry except for the
    /// piecewise-constant variant).
    weights: Vec<DVector<f64>>,
    /// Pre-computed coordinate sums `Σ_i w_i` per segment; this is
    /// `max_a ⟨a, w⟩` over the unit cube since `w ≥ 0`.
    weight_sums: Vec<f64>,
}

fn draw_unit_cube(rng: &mut rand_chacha::ChaCha12Rng, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| crate::rng::unit_uniform(rng))
}

impl LinearBanditEnv {
    /// Draws the hidden weight vector(s) for `spec` from the stream rooted
    /// at `seeds`. Fails with a configuration error if the spec is invalid.
    pub fn sample(spec: EnvSpec, seeds: SeedDerivation) -> Result<Self> {
        spec.validate()?;
        let segments = match &spec.variant {
            EnvVariant::PiecewiseConstant { change_times } => change_times.len() + 1,
            _ => 1,
        };
        let mut weights = Vec::with_capacity(segments);
        for seg in 0..segments {
            let mut rng = seeds.stream(StreamKind::EnvWeights, seg as u64);
            weights.push(draw_unit_cube(&mut rng, spec.dim));
        }
        let weight_sums = weights.iter().map(|w| w.sum()).collect();
        Ok(LinearBanditEnv { spec, seeds, weights, weight_sums })
    }

    /// The specification this instance was sampled from.
    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    /// The hidden weight vector in effect at round `t`.
    pub fn weights_at(&self, t: u64) -> &DVector<f64> {
        &self.weights[self.segment_of(t)]
    }

    fn segment_of(&self, t: u64) -> usize {
        match &self.spec.variant {
            EnvVariant::PiecewiseConstant { change_times } => {
                change_times.iter().filter(|&&c| c <= t).count()
            }
            _ => 0,
        }
    }

    fn check_round(&self, t: u64) -> Result<()> {
        if t == 0 || t > self.spec.horizon {
            return Err(Error::domain(format!(
                "round {t} outside [1, {}]",
                self.spec.horizon
            )));
        }
        Ok(())
    }

    /// The action set for round `t`: `A` i.i.d. `Unif([0,1]^d)` vectors,
    /// a pure function of the environment seed and `t`.
    pub fn draw_action_set(&self, t: u64) -> Result<Vec<DVector<f64>>> {
        self.check_round(t)?;
        let mut rng = self.seeds.stream(StreamKind::ActionSet, t);
        Ok((0..self.spec.num_actions)
            .map(|_| draw_unit_cube(&mut rng, self.spec.dim))
            .collect())
    }

    /// The reward range `(lo, hi)` in effect at round `t` for the
    /// piecewise-elevated variant, `None` otherwise.
    fn elevation_range(&self, t: u64) -> Option<(f64, f64)> {
        match &self.spec.variant {
            EnvVariant::PiecewiseElevated { intervals, elevated_range, base_range } => {
                let inside = intervals.iter().any(|&(s, e)| s <= t && t <= e);
                Some(if inside { *elevated_range } else { *base_range })
            }
            _ => None,
        }
    }

    /// Expected reward of action `a` at round `t` (raw scale).
    pub fn mean_reward(&self, t: u64, a: &DVector<f64>) -> f64 {
        let w = self.weights_at(t);
        let inner = w.dot(a);
        match &self.spec.variant {
            EnvVariant::Stationary | EnvVariant::PiecewiseConstant { .. } => inner,
            EnvVariant::CosineModulated { b } => inner * cosine_factor(*b, t),
            EnvVariant::PiecewiseElevated { .. } => {
                let (lo, hi) = self.elevation_range(t).expect("elevated variant");
                let sum = self.weight_sums[0];
                if sum > 0.0 {
                    lo + inner * (hi - lo) / sum
                } else {
                    lo
                }
            }
        }
    }

    /// Realized reward of action `a` at round `t` (raw scale). The noise
    /// draw is keyed by `t` alone, so the function is deterministic per
    /// `(seed, t, a)` and the same `ε_t` is shared by all actions of a
    /// round. For the cosine variant the modulation multiplies the noisy
    /// sum, so the reward is exactly zero wherever the cosine vanishes.
    pub fn sample_reward(&self, t: u64, a: &DVector<f64>) -> f64 {
        let mut rng = self.seeds.stream(StreamKind::Noise, t);
        let eps = if self.spec.noise_std > 0.0 {
            Normal::new(0.0, self.spec.noise_std)
                .expect("validated noise_std")
                .sample(&mut rng)
        } else {
            0.0
        };
        match &self.spec.variant {
            EnvVariant::CosineModulated { b } => {
                (self.weights_at(t).dot(a) + eps) * cosine_factor(*b, t)
            }
            _ => self.mean_reward(t, a) + eps,
        }
    }

    /// Best achievable expected reward over `actions` at round `t`.
    pub fn optimal_reward(&self, t: u64, actions: &[DVector<f64>]) -> f64 {
        actions
            .iter()
            .map(|a| self.mean_reward(t, a))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Raw reward bounds `(lo, hi)` used by the normalization map.
    ///
    /// Ranges are derived from the configuration: the mean-reward span of
    /// the variant (noise is handled by clipping, not by widening the
    /// range).
    pub fn normalization_bounds(&self) -> (f64, f64) {
        match &self.spec.variant {
            EnvVariant::Stationary => (0.0, self.weight_sums[0].max(f64::MIN_POSITIVE)),
            EnvVariant::PiecewiseElevated { elevated_range, base_range, .. } => (
                base_range.0.min(elevated_range.0),
                base_range.1.max(elevated_range.1),
            ),
            EnvVariant::CosineModulated { .. } => {
                let m = self.weight_sums[0].max(f64::MIN_POSITIVE);
                (-m, m)
            }
            EnvVariant::PiecewiseConstant { .. } => {
                let m = self
                    .weight_sums
                    .iter()
                    .fold(0.0f64, |acc, &s| acc.max(s))
                    .max(f64::MIN_POSITIVE);
                (0.0, m)
            }
        }
    }

    /// Learner-facing reward: affine map of [`Self::normalization_bounds`]
    /// onto `[0,1]`, clipped (noise can exceed the configured range).
    /// Identity when the spec's `normalize` flag is off.
    pub fn normalize_reward(&self, raw: f64) -> f64 {
        if !self.spec.normalize {
            return raw;
        }
        let (lo, hi) = self.normalization_bounds();
        ((raw - lo) / (hi - lo)).clamp(0.0, 1.0)
    }

    /// Per-round drift `Δ(t) = max_a |mean(t+1, a) - mean(t, a)|`, the
    /// maximum taken over the whole unit cube. Closed forms per variant:
    ///
    /// * stationary: `0`;
    /// * piecewise-elevated: `max(|Δlo|, |Δhi|)` of the active ranges
    ///   (the maximand is affine in `⟨a, w⟩`, so the maximum sits at one
    ///   of the ends of the attainable span `[0, Σw]`);
    /// * cosine: `|cos(2πb(t+1)) - cos(2πbt)| · Σw` (maximized at the
    ///   all-ones corner since `w ≥ 0`);
    /// * piecewise-constant: `max(Σ δ⁺, Σ δ⁻)` for `δ = w_{t+1} - w_t`
    ///   (a linear functional on the cube is maximized at a corner).
    pub fn delta(&self, t: u64) -> Result<f64> {
        self.check_round(t)?;
        self.check_round(t + 1)?;
        Ok(match &self.spec.variant {
            EnvVariant::Stationary => 0.0,
            EnvVariant::PiecewiseElevated { .. } => {
                let (lo0, hi0) = self.elevation_range(t).expect("elevated variant");
                let (lo1, hi1) = self.elevation_range(t + 1).expect("elevated variant");
                (lo1 - lo0).abs().max((hi1 - hi0).abs())
            }
            EnvVariant::CosineModulated { b } => {
                (cosine_factor(*b, t + 1) - cosine_factor(*b, t)).abs() * self.weight_sums[0]
            }
            EnvVariant::PiecewiseConstant { .. } => {
                let w0 = self.weights_at(t);
                let w1 = self.weights_at(t + 1);
                let (mut pos, mut neg) = (0.0f64, 0.0f64);
                for i in 0..w0.len() {
                    let d = w1[i] - w0[i];
                    if d > 0.0 {
                        pos += d;
                    } else {
                        neg -= d;
                    }
                }
                pos.max(neg)
            }
        })
    }

    /// Interval drift `Δ_[s,e] = Σ_{τ=s}^{e-1} Δ(τ)`; zero when `s == e`.
    pub fn delta_interval(&self, s: u64, e: u64) -> Result<f64> {
        if s == 0 || s > e || e > self.spec.horizon {
            return Err(Error::domain(format!(
                "interval [{s}, {e}] outside [1, {}]",
                self.spec.horizon
            )));
        }
        let mut total = 0.0;
        for tau in s..e {
            total += self.delta(tau)?;
        }
        Ok(total)
    }

    /// Switch count `J_[s,e] = 1 + #{τ in [s, e-1] : Δ(τ) ≠ 0}`.
    pub fn jumps_interval(&self, s: u64, e: u64) -> Result<u64> {
        if s == 0 || s > e || e > self.spec.horizon {
            return Err(Error::domain(format!(
                "interval [{s}, {e}] outside [1, {}]",
                self.spec.horizon
            )));
        }
        let mut jumps = 1;
        for tau in s..e {
            if self.delta(tau)? != 0.0 {
                jumps += 1;
            }
        }
        Ok(jumps)
    }
}

fn cosine_factor(b: f64, t: u64) -> f64 {
    (2.0 * std::f64::consts::PI * b * t as f64).cos()
}
