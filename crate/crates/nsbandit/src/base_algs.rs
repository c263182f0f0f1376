//! Stationary base learners behind a common policy interface.
//!
//! Both learners consume normalized rewards in `[0,1]` and expose, besides
//! an action distribution, a per-round scalar estimate `r_tilde` of the
//! reward they believe is achievable right now. The restart meta-algorithm
//! treats that estimate as the quantity its stationarity tests compare
//! against realized rewards, so it must be optimistic for a calibrated
//! learner: both implementations use a mean-plus-one-uncertainty-width
//! score clipped to `[0,1]`.
//!
//! * [`LinUcb`] — ridge regression with an upper-confidence bonus
//!   `⟨θ̂, a⟩ + α √(aᵀ V⁻¹ a)`, `V = λI + Σ a aᵀ`.
//! * [`LinearThompson`] — Bayesian linear regression with a Gaussian prior;
//!   actions are ranked by a posterior sample, `r_tilde` is the posterior
//!   mean plus one posterior standard deviation of the selected action.
//!
//! Both policies emit one-hot distributions (ties broken toward the lowest
//! index) and are deterministic given their state and, for Thompson
//! sampling, the per-round stream passed to [`Policy::act`].

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Error;
use crate::Result;

/// Interface shared by every learner the schedulers can drive.
pub trait Policy {
    /// Forget everything and return to the prior state.
    fn reset(&mut self);

    /// Choose among `actions`: returns a probability distribution over
    /// action indices plus the scalar performance estimate `r_tilde`
    /// (always within `[0,1]`). `rng` is only consumed by randomized
    /// policies; deterministic ones ignore it.
    fn act(
        &mut self,
        actions: &[DVector<f64>],
        rng: &mut ChaCha12Rng,
    ) -> Result<(Vec<f64>, f64)>;

    /// Incorporate the observed (normalized) reward for the played action.
    fn update(&mut self, action: &DVector<f64>, reward: f64);
}

/// Index of the largest score, ties broken toward the lowest index.
/// Invariant under multiplying all scores by a positive constant.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn one_hot(index: usize, len: usize) -> Vec<f64> {
    let mut dist = vec![0.0; len];
    dist[index] = 1.0;
    dist
}

fn require_actions(actions: &[DVector<f64>], dim: usize) -> Result<()> {
    if actions.is_empty() {
        return Err(Error::domain("action set is empty"));
    }
    if let Some(a) = actions.iter().find(|a| a.len() != dim) {
        return Err(Error::domain(format!(
            "action has dimension {}, learner expects {dim}",
            a.len()
        )));
    }
    Ok(())
}

/// LinUCB with ridge regularization.
#[derive(Debug, Clone)]
pub struct LinUcb {
    dim: usize,
    alpha: f64,
    lambda: f64,
    /// Divisor applied to the raw UCB score before clipping into `[0,1]`
    /// to form `r_tilde`; 1.0 means plain clipping.
    r_tilde_scale: f64,
    gram: DMatrix<f64>,
    moment: DVector<f64>,
    rounds: u64,
}

impl LinUcb {
    /// A fresh learner with exploration width `alpha` and ridge `lambda`.
    pub fn new(dim: usize, alpha: f64, lambda: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("LinUCB dimension must be at least 1"));
        }
        if !(alpha >= 0.0) || !(lambda > 0.0) {
            return Err(Error::config(format!(
                "LinUCB needs alpha >= 0 and lambda > 0, got alpha={alpha}, lambda={lambda}"
            )));
        }
        Ok(LinUcb {
            dim,
            alpha,
            lambda,
            r_tilde_scale: 1.0,
            gram: DMatrix::identity(dim, dim) * lambda,
            moment: DVector::zeros(dim),
            rounds: 0,
        })
    }

    /// Sets the `r_tilde` divisor (must be positive).
    pub fn with_r_tilde_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::config("r_tilde scale must be positive"));
        }
        self.r_tilde_scale = scale;
        Ok(self)
    }

    /// Current ridge estimate `θ̂ = V⁻¹ b`.
    pub fn estimate(&self) -> Result<DVector<f64>> {
        let chol = self
            .gram
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Internal("LinUCB Gram matrix is not positive definite".into()))?;
        Ok(chol.solve(&self.moment))
    }

    /// UCB scores `⟨θ̂, a⟩ + α √(aᵀ V⁻¹ a)` for each action.
    pub fn scores(&self, actions: &[DVector<f64>]) -> Result<Vec<f64>> {
        require_actions(actions, self.dim)?;
        let chol = self
            .gram
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Internal("LinUCB Gram matrix is not positive definite".into()))?;
        let theta = chol.solve(&self.moment);
        Ok(actions
            .iter()
            .map(|a| {
                let width = chol.solve(a).dot(a).max(0.0).sqrt();
                theta.dot(a) + self.alpha * width
            })
            .collect())
    }

    /// Rounds of data currently absorbed.
    pub fn rounds(&self) -> u64 {
        self.rounds
    }
}

impl Policy for LinUcb {
    fn reset(&mut self) {
        self.gram = DMatrix::identity(self.dim, self.dim) * self.lambda;
        self.moment = DVector::zeros(self.dim);
        self.rounds = 0;
    }

    fn act(
        &mut self,
        actions: &[DVector<f64>],
        _rng: &mut ChaCha12Rng,
    ) -> Result<(Vec<f64>, f64)> {
        let scores = self.scores(actions)?;
        let chosen = argmax_lowest(&scores);
        let r_tilde = (scores[chosen] / self.r_tilde_scale).clamp(0.0, 1.0);
        Ok((one_hot(chosen, actions.len()), r_tilde))
    }

    fn update(&mut self, action: &DVector<f64>, reward: f64) {
        self.gram.ger(1.0, action, action, 1.0);
        self.moment.axpy(reward, action, 1.0);
        self.rounds += 1;
    }
}

/// Linear Thompson sampling with a Gaussian conjugate posterior.
#[derive(Debug, Clone)]
pub struct LinearThompson {
    dim: usize,
    prior_scale: f64,
    noise_var: f64,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    rounds: u64,
}

impl LinearThompson {
    /// A fresh learner with prior `N(0, prior_scale · I)` and observation
    /// noise variance `noise_var`.
    pub fn new(dim: usize, prior_scale: f64, noise_var: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("Thompson dimension must be at least 1"));
        }
        if !(prior_scale > 0.0) || !(noise_var > 0.0) {
            return Err(Error::config(format!(
                "Thompson needs positive prior scale and noise variance, got {prior_scale}, {noise_var}"
            )));
        }
        Ok(LinearThompson {
            dim,
            prior_scale,
            noise_var,
            mean: DVector::zeros(dim),
            cov: DMatrix::identity(dim, dim) * prior_scale,
            rounds: 0,
        })
    }

    /// Posterior mean.
    pub fn posterior_mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Posterior covariance.
    pub fn posterior_cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    fn sample_weights(&self, rng: &mut ChaCha12Rng) -> Result<DVector<f64>> {
        let chol = self.cov.clone().cholesky().ok_or_else(|| {
            Error::Internal("Thompson posterior covariance lost positive definiteness".into())
        })?;
        let z = DVector::from_fn(self.dim, |_, _| StandardNormal.sample(rng));
        Ok(&self.mean + chol.l() * z)
    }
}

impl Policy for LinearThompson {
    fn reset(&mut self) {
        self.mean = DVector::zeros(self.dim);
        self.cov = DMatrix::identity(self.dim, self.dim) * self.prior_scale;
        self.rounds = 0;
    }

    fn act(
        &mut self,
        actions: &[DVector<f64>],
        rng: &mut ChaCha12Rng,
    ) -> Result<(Vec<f64>, f64)> {
        require_actions(actions, self.dim)?;
        let sampled = self.sample_weights(rng)?;
        let scores: Vec<f64> = actions.iter().map(|a| sampled.dot(a)).collect();
        let chosen = argmax_lowest(&scores);
        let a = &actions[chosen];
        let post_var = (&self.cov * a).dot(a).max(0.0);
        let r_tilde = (self.mean.dot(a) + post_var.sqrt()).clamp(0.0, 1.0);
        Ok((one_hot(chosen, actions.len()), r_tilde))
    }

    fn update(&mut self, action: &DVector<f64>, reward: f64) {
        // Rank-one Sherman–Morrison update of the conjugate posterior.
        let s = &self.cov * action;
        let denom = self.noise_var + s.dot(action);
        let gain = (reward - self.mean.dot(action)) / denom;
        self.mean.axpy(gain, &s, 1.0);
        self.cov.ger(-1.0 / denom, &s, &s, 1.0);
        // Keep the covariance exactly symmetric against rounding drift.
        for i in 0..self.dim {
            for j in (i + 1)..self.dim {
                let avg = 0.5 * (self.cov[(i, j)] + self.cov[(j, i)]);
                self.cov[(i, j)] = avg;
                self.cov[(j, i)] = avg;
            }
        }
        self.rounds += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{SeedDerivation, StreamKind};
    use proptest::prelude::*;

    fn rng(seed: u64) -> ChaCha12Rng {
        SeedDerivation::new(seed).stream(StreamKind::Bench, 0)
    }

    fn unit(dim: usize, axis: usize) -> DVector<f64> {
        DVector::from_fn(dim, |i, _| if i == axis { 1.0 } else { 0.0 })
    }

    fn random_action(rng: &mut ChaCha12Rng, dim: usize) -> DVector<f64> {
        DVector::from_fn(dim, |_, _| crate::rng::unit_uniform(rng))
    }

    #[test]
    fn one_update_has_closed_form_estimate() {
        // V = diag(2, 1), b = (1, 0) after observing (e1, reward 1) with
        // lambda 1, so θ̂ = (1/2, 0).
        let mut ucb = LinUcb::new(2, 1.0, 1.0).unwrap();
        ucb.update(&unit(2, 0), 1.0);
        let theta = ucb.estimate().unwrap();
        assert!((theta[0] - 0.5).abs() < 1e-15);
        assert!(theta[1].abs() < 1e-15);
    }

    #[test]
    fn scores_match_dense_inverse_oracle() {
        let mut ucb = LinUcb::new(2, 1.0, 1.0).unwrap();
        let mut r = rng(40);
        let mut observations = Vec::new();
        for _ in 0..5 {
            let a = random_action(&mut r, 2);
            let reward = crate::rng::unit_uniform(&mut r);
            ucb.update(&a, reward);
            observations.push((a, reward));
        }
        // Oracle: explicit 2x2 inverse of V = I + Σ a aᵀ.
        let mut v = DMatrix::<f64>::identity(2, 2);
        let mut b = DVector::<f64>::zeros(2);
        for (a, reward) in &observations {
            v += a * a.transpose();
            b += a * *reward;
        }
        let det = v[(0, 0)] * v[(1, 1)] - v[(0, 1)] * v[(1, 0)];
        let v_inv = DMatrix::from_row_slice(
            2,
            2,
            &[v[(1, 1)] / det, -v[(0, 1)] / det, -v[(1, 0)] / det, v[(0, 0)] / det],
        );
        let theta = &v_inv * &b;
        let actions: Vec<DVector<f64>> = (0..6).map(|_| random_action(&mut r, 2)).collect();
        let scores = ucb.scores(&actions).unwrap();
        let mut oracle_best = 0;
        for (i, a) in actions.iter().enumerate() {
            let width = ((&v_inv * a).dot(a)).sqrt();
            let expect = theta.dot(a) + width;
            assert!(
                (scores[i] - expect).abs() < 1e-10,
                "action {i}: {} vs oracle {expect}",
                scores[i]
            );
            if expect > scores[oracle_best] {
                oracle_best = i;
            }
        }
        let (dist, _) = ucb.act(&actions, &mut rng(41)).unwrap();
        assert_eq!(argmax_lowest(&dist), oracle_best);
    }

    #[test]
    fn gram_and_moment_match_recomputation() {
        let mut ucb = LinUcb::new(6, 1.0, 1.0).unwrap();
        let mut r = rng(42);
        let mut gram = DMatrix::<f64>::identity(6, 6);
        let mut moment = DVector::<f64>::zeros(6);
        for _ in 0..100 {
            let a = random_action(&mut r, 6);
            let reward = crate::rng::unit_uniform(&mut r);
            ucb.update(&a, reward);
            gram += &a * a.transpose();
            moment += &a * reward;
        }
        let theta = ucb.estimate().unwrap();
        let oracle_theta = gram.clone().cholesky().unwrap().solve(&moment);
        for i in 0..6 {
            assert!((theta[i] - oracle_theta[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn fresh_learner_prefers_unexplored_direction() {
        // Fresh state: zero estimate, so only the width term differs;
        // e1 has width 1, the zero vector has width 0.
        let mut ucb = LinUcb::new(4, 1.0, 1.0).unwrap();
        let actions = vec![unit(4, 0), DVector::zeros(4)];
        let (dist, r_tilde) = ucb.act(&actions, &mut rng(43)).unwrap();
        assert_eq!(dist, vec![1.0, 0.0]);
        assert!((r_tilde - 1.0).abs() < 1e-15, "width-1 score clips to 1");
    }

    #[test]
    fn ties_break_toward_lowest_index() {
        let mut ucb = LinUcb::new(3, 1.0, 1.0).unwrap();
        let a = random_action(&mut rng(44), 3);
        let (dist, _) = ucb.act(&vec![a.clone(), a.clone(), a], &mut rng(45)).unwrap();
        assert_eq!(dist, vec![1.0, 0.0, 0.0]);
        assert_eq!(argmax_lowest(&[0.25, 0.75, 0.75]), 1);
    }

    #[test]
    fn argmax_ignores_positive_scaling() {
        let scores = [0.3, 1.4, 0.9, 1.4];
        let scaled: Vec<f64> = scores.iter().map(|s| s * 17.5).collect();
        assert_eq!(argmax_lowest(&scores), argmax_lowest(&scaled));
        assert_eq!(argmax_lowest(&scores), 1);
    }

    #[test]
    fn act_leaves_state_unchanged() {
        let mut ucb = LinUcb::new(3, 1.0, 1.0).unwrap();
        let mut r = rng(46);
        for _ in 0..10 {
            let a = random_action(&mut r, 3);
            ucb.update(&a, 0.5);
        }
        let actions: Vec<DVector<f64>> = (0..4).map(|_| random_action(&mut r, 3)).collect();
        let first = ucb.act(&actions, &mut rng(47)).unwrap();
        let second = ucb.act(&actions, &mut rng(48)).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn empty_or_mismatched_action_sets_are_domain_errors() {
        let mut ucb = LinUcb::new(3, 1.0, 1.0).unwrap();
        assert!(ucb.act(&[], &mut rng(49)).is_err());
        assert!(ucb.act(&[DVector::zeros(2)], &mut rng(49)).is_err());
    }

    #[test]
    fn thompson_posterior_matches_batch_oracle() {
        let noise_var = 0.3 * 0.3;
        let mut ts = LinearThompson::new(4, 1.0, noise_var).unwrap();
        let mut r = rng(50);
        let mut design: Vec<(DVector<f64>, f64)> = Vec::new();
        for _ in 0..30 {
            let a = random_action(&mut r, 4);
            let reward = crate::rng::unit_uniform(&mut r);
            ts.update(&a, reward);
            design.push((a, reward));
        }
        // Batch conjugate posterior: Σ = (I/prior + XᵀX/v²)⁻¹, μ = Σ Xᵀy/v².
        let mut precision = DMatrix::<f64>::identity(4, 4);
        let mut rhs = DVector::<f64>::zeros(4);
        for (a, reward) in &design {
            precision += a * a.transpose() / noise_var;
            rhs += a * (*reward / noise_var);
        }
        let chol = precision.cholesky().unwrap();
        let cov_oracle = chol.inverse();
        let mean_oracle = chol.solve(&rhs);
        for i in 0..4 {
            assert!((ts.posterior_mean()[i] - mean_oracle[i]).abs() < 1e-9);
            for j in 0..4 {
                assert!((ts.posterior_cov()[(i, j)] - cov_oracle[(i, j)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn thompson_selection_frequency_matches_sampling_oracle() {
        let mut ts = LinearThompson::new(2, 1.0, 0.09).unwrap();
        let mut r = rng(51);
        for _ in 0..20 {
            let a = random_action(&mut r, 2);
            ts.update(&a, crate::rng::unit_uniform(&mut r));
        }
        let actions = vec![random_action(&mut r, 2), random_action(&mut r, 2)];
        let n = 100_000;
        let mut hits = 0u64;
        for i in 0..n {
            let mut draw_rng = SeedDerivation::new(52).stream(StreamKind::Posterior, i);
            let (dist, _) = ts.act(&actions, &mut draw_rng).unwrap();
            if dist[0] == 1.0 {
                hits += 1;
            }
        }
        // Oracle: sample the posterior directly through nalgebra and
        // compare inner products, on an independent stream.
        let chol = ts.posterior_cov().clone().cholesky().unwrap();
        let mut oracle_rng = rng(53);
        let mut oracle_hits = 0u64;
        for _ in 0..n {
            let z = DVector::from_fn(2, |_, _| {
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut oracle_rng)
            });
            let w = ts.posterior_mean() + chol.l() * z;
            if w.dot(&actions[0]) >= w.dot(&actions[1]) {
                oracle_hits += 1;
            }
        }
        let p_hat = hits as f64 / n as f64;
        let p_oracle = oracle_hits as f64 / n as f64;
        let pooled = 0.5 * (p_hat + p_oracle);
        let se = (pooled * (1.0 - pooled) * 2.0 / n as f64).sqrt();
        assert!(
            (p_hat - p_oracle).abs() <= 3.0 * se.max(1e-6),
            "implementation {p_hat} vs oracle {p_oracle} (se {se})"
        );
    }

    #[test]
    fn thompson_zero_action_update_is_noop() {
        let mut ts = LinearThompson::new(3, 1.0, 0.09).unwrap();
        let mut r = rng(54);
        for _ in 0..5 {
            let a = random_action(&mut r, 3);
            ts.update(&a, 0.3);
        }
        let mean_before = ts.posterior_mean().clone();
        let cov_before = ts.posterior_cov().clone();
        ts.update(&DVector::zeros(3), 0.9);
        assert_eq!(ts.posterior_mean(), &mean_before);
        assert_eq!(ts.posterior_cov(), &cov_before);
    }

    #[test]
    fn thompson_covariance_trace_decreases() {
        let mut ts = LinearThompson::new(5, 1.0, 0.09).unwrap();
        let mut r = rng(55);
        let mut prev = ts.posterior_cov().trace();
        for _ in 0..50 {
            let a = random_action(&mut r, 5);
            ts.update(&a, crate::rng::unit_uniform(&mut r));
            let now = ts.posterior_cov().trace();
            assert!(now < prev, "trace must strictly decrease: {now} !< {prev}");
            prev = now;
        }
    }

    #[test]
    fn reset_restores_the_prior() {
        let mut ts = LinearThompson::new(3, 2.0, 0.09).unwrap();
        let mut ucb = LinUcb::new(3, 1.0, 1.5).unwrap();
        let mut r = rng(56);
        for _ in 0..10 {
            let a = random_action(&mut r, 3);
            ts.update(&a, 0.7);
            ucb.update(&a, 0.7);
        }
        ts.reset();
        ucb.reset();
        assert_eq!(ts.posterior_mean(), &DVector::zeros(3));
        assert_eq!(ts.posterior_cov(), &(DMatrix::identity(3, 3) * 2.0));
        assert_eq!(ts.rounds, 0);
        let fresh = LinUcb::new(3, 1.0, 1.5).unwrap();
        assert_eq!(ucb.gram, fresh.gram);
        assert_eq!(ucb.moment, fresh.moment);
        assert_eq!(ucb.rounds(), 0);
    }

    proptest! {
        #[test]
        fn distributions_are_one_hot_and_r_tilde_clipped(
            seed in 0u64..1000,
            updates in 0usize..20,
            num_actions in 1usize..8,
        ) {
            let mut r = rng(seed);
            let mut ucb = LinUcb::new(3, 1.0, 1.0).unwrap();
            let mut ts = LinearThompson::new(3, 1.0, 0.09).unwrap();
            for _ in 0..updates {
                let a = random_action(&mut r, 3);
                let reward = crate::rng::unit_uniform(&mut r);
                ucb.update(&a, reward);
                ts.update(&a, reward);
            }
            let actions: Vec<DVector<f64>> =
                (0..num_actions).map(|_| random_action(&mut r, 3)).collect();
            for (dist, r_tilde) in [
                ucb.act(&actions, &mut rng(seed + 1)).unwrap(),
                ts.act(&actions, &mut rng(seed + 2)).unwrap(),
            ] {
                prop_assert_eq!(dist.len(), num_actions);
                prop_assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-15);
                prop_assert_eq!(dist.iter().filter(|&&p| p == 1.0).count(), 1);
                prop_assert!((0.0..=1.0).contains(&r_tilde));
            }
        }
    }
}
