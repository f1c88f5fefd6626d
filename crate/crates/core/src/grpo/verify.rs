//! Numerical checks of the GRPO machinery: analytic gradient against central
//! finite differences, the identity-ratio gradient, mask invariance, and a
//! bandit that must learn.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    clipped_term_slope, objective_at, reevaluate, surrogate_gradient, surrogate_objective,
    toy_rollout, train_step_sim, GrpoError, GrpoParams, RolloutGroup, ToyPolicy, Trajectory,
};
use crate::seed::{derive_seed, rng_for};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub params: GrpoParams,
    /// `(vocab, len)` shapes for the gradient check.
    pub shapes: Vec<(usize, usize)>,
    pub fd_step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub mask_trials: usize,
    pub bandit_vocab: usize,
    pub bandit_rewarded_token: usize,
    pub bandit_lr: f64,
    pub bandit_steps: usize,
    pub bandit_window: usize,
    pub bandit_threshold: f64,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            params: GrpoParams::default(),
            shapes: vec![(3, 1), (3, 4), (5, 1), (5, 4)],
            fd_step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
            mask_trials: 100,
            bandit_vocab: 4,
            bandit_rewarded_token: 3,
            bandit_lr: 0.5,
            bandit_steps: 200,
            bandit_window: 20,
            bandit_threshold: 0.9,
            seed: 0,
        }
    }
}

/// Deterministic reward with enough spread that groups rarely tie.
fn shaped_reward(seq: &[usize]) -> f64 {
    seq.iter()
        .enumerate()
        .map(|(p, &t)| ((t * 7 + p * 3) % 5) as f64 * 0.25 + if t == p % 3 { 1.0 } else { 0.0 })
        .sum()
}

fn default_mask(len: usize) -> Vec<bool> {
    // Position 1 is treated as injected whenever there is more than one position.
    (0..len).map(|p| len > 1 && p == 1).collect()
}

/// A group with non-zero advantages, sampled from `old`.
fn informative_group(
    old: &ToyPolicy,
    mask: &[bool],
    params: &GrpoParams,
    seed: u64,
) -> Result<RolloutGroup, GrpoError> {
    for attempt in 0..1000 {
        let group = toy_rollout(
            old,
            &shaped_reward,
            mask,
            params,
            derive_seed(seed, &format!("group/{attempt}")),
        )?;
        if group
            .rollouts
            .iter()
            .any(|r| r.advantage.unwrap_or(0.0) != 0.0)
        {
            return Ok(group);
        }
    }
    panic!("no informative group found");
}

/// Perturbs `old` until no unmasked ratio sits within `margin` of a clip edge,
/// where the objective is not differentiable.
fn perturbed_away_from_kinks(
    old: &ToyPolicy,
    group: &RolloutGroup,
    margin: f64,
    seed: u64,
) -> Result<(ToyPolicy, usize), GrpoError> {
    let eps = group.epsilon;
    for attempt in 0..1000 {
        let mut rng = rng_for(seed, &format!("perturb/{attempt}"));
        let mut new = old.clone();
        for x in &mut new.theta {
            *x += rng.gen_range(-0.5..=0.5);
        }
        let evaluated = reevaluate(&new, group)?;
        let mut clipped = 0;
        let mut near_kink = false;
        for r in &evaluated.rollouts {
            let a = r.advantage.unwrap_or(0.0);
            for t in r.tokens.iter().filter(|t| !t.masked) {
                let ratio = (t.logprob_new - t.logprob_old).exp();
                near_kink |=
                    (ratio - (1.0 - eps)).abs() < margin || (ratio - (1.0 + eps)).abs() < margin;
                if a != 0.0 && clipped_term_slope(ratio, a, eps) == 0.0 {
                    clipped += 1;
                }
            }
        }
        if !near_kink {
            return Ok((new, clipped));
        }
    }
    panic!("could not avoid clip boundaries");
}

/// Central differences of `J` at `policy`, one component at a time.
pub fn finite_difference_gradient(
    policy: &ToyPolicy,
    group: &RolloutGroup,
    h: f64,
) -> Result<Vec<f64>, GrpoError> {
    let mut out = Vec::with_capacity(policy.theta.len());
    for j in 0..policy.theta.len() {
        let mut plus = policy.clone();
        plus.theta[j] += h;
        let mut minus = policy.clone();
        minus.theta[j] -= h;
        out.push((objective_at(&plus, group)? - objective_at(&minus, group)?) / (2.0 * h));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub vocab: usize,
    pub len: usize,
    pub group_size: usize,
    pub epsilon: f64,
    pub components: usize,
    pub clipped_tokens: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub failures: usize,
    pub passed: bool,
}

pub fn gradient_check(
    vocab: usize,
    len: usize,
    config: &VerifyConfig,
    seed: u64,
) -> Result<GradientCheck, GrpoError> {
    let old = ToyPolicy::random(vocab, len, 1.0, seed);
    let mask = default_mask(len);
    let group = informative_group(&old, &mask, &config.params, seed)?;
    let (new, clipped_tokens) = perturbed_away_from_kinks(&old, &group, 1e-3, seed)?;
    let analytic = surrogate_gradient(&new, &group)?;
    let numeric = finite_difference_gradient(&new, &group, config.fd_step)?;
    let mut max_abs_err: f64 = 0.0;
    let mut max_rel_err: f64 = 0.0;
    let mut failures = 0;
    for (a, n) in analytic.iter().zip(&numeric) {
        let abs = (a - n).abs();
        let scale = a.abs().max(n.abs());
        let rel = if scale > 0.0 { abs / scale } else { 0.0 };
        max_abs_err = max_abs_err.max(abs);
        if scale > config.abs_tol {
            max_rel_err = max_rel_err.max(rel);
        }
        if !(abs <= config.abs_tol || rel <= config.rel_tol) {
            failures += 1;
        }
    }
    Ok(GradientCheck {
        vocab,
        len,
        group_size: config.params.group_size,
        epsilon: config.params.epsilon,
        components: analytic.len(),
        clipped_tokens,
        max_abs_err,
        max_rel_err,
        failures,
        passed: failures == 0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub vocab: usize,
    pub len: usize,
    pub max_abs_err: f64,
    pub passed: bool,
}

/// At `θ = θ_old` every ratio is 1 and the gradient must equal the
/// advantage-weighted score function `1/N Σ_i A_i Σ_t ∇ log π(o_{i,t})`.
pub fn identity_check(
    vocab: usize,
    len: usize,
    config: &VerifyConfig,
    seed: u64,
) -> Result<IdentityCheck, GrpoError> {
    let policy = ToyPolicy::random(vocab, len, 1.0, seed);
    let group = informative_group(&policy, &default_mask(len), &config.params, seed)?;
    let analytic = surrogate_gradient(&policy, &group)?;
    let n = group.unmasked_tokens() as f64;
    let mut reinforce = vec![0.0; policy.theta.len()];
    for r in &group.rollouts {
        let a = r.advantage.expect("assigned");
        for (p, t) in r.tokens.iter().enumerate().filter(|(_, t)| !t.masked) {
            let probs = policy.probs(p);
            for (j, pj) in probs.iter().enumerate() {
                let score = if j == t.token_id { 1.0 - pj } else { -pj };
                reinforce[policy.param_index(p, j)] += a * score / n;
            }
        }
    }
    let max_abs_err = analytic
        .iter()
        .zip(&reinforce)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(IdentityCheck {
        vocab,
        len,
        max_abs_err,
        passed: max_abs_err < 1e-12,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskCheck {
    pub trials: usize,
    /// Trials in which the objective or gradient changed at all.
    pub objective_changes: usize,
    pub gradient_changes: usize,
    /// Largest |dJ/dθ| over parameters of positions masked in every rollout.
    pub max_masked_position_grad: f64,
    pub passed: bool,
}

pub fn mask_invariance_check(
    trials: usize,
    config: &VerifyConfig,
    seed: u64,
) -> Result<MaskCheck, GrpoError> {
    let (vocab, len) = (5, 4);
    let mut objective_changes = 0;
    let mut gradient_changes = 0;
    let mut max_masked_position_grad: f64 = 0.0;
    for trial in 0..trials {
        let tseed = derive_seed(seed, &format!("mask/{trial}"));
        let mut rng = rng_for(tseed, "mask-layout");
        let mut mask: Vec<bool> = (0..len).map(|_| rng.gen_bool(0.5)).collect();
        mask[0] = false;
        mask[len - 1] = true;
        let old = ToyPolicy::random(vocab, len, 1.0, tseed);
        let group = informative_group(&old, &mask, &config.params, tseed)?;
        let mut new = old.clone();
        for x in &mut new.theta {
            *x += rng.gen_range(-0.5..=0.5);
        }
        let base = reevaluate(&new, &group)?;
        let j0 = surrogate_objective(&base)?;
        let g0 = surrogate_gradient(&new, &group)?;

        let mut tampered = base.clone();
        let mut tampered_old = group.clone();
        for (r, r_old) in tampered
            .rollouts
            .iter_mut()
            .zip(tampered_old.rollouts.iter_mut())
        {
            for (t, t_old) in r.tokens.iter_mut().zip(r_old.tokens.iter_mut()) {
                if t.masked {
                    t.logprob_new = rng.gen_range(-20.0..0.0);
                    t.logprob_old = rng.gen_range(-20.0..0.0);
                    t_old.logprob_old = t.logprob_old;
                }
            }
        }
        if surrogate_objective(&tampered)?.to_bits() != j0.to_bits() {
            objective_changes += 1;
        }
        let g1 = surrogate_gradient(&new, &tampered_old)?;
        if g0.iter().zip(&g1).any(|(a, b)| a.to_bits() != b.to_bits()) {
            gradient_changes += 1;
        }
        // Parameters of always-masked positions must not move J.
        for p in (0..len).filter(|&p| mask[p]) {
            for j in 0..vocab {
                max_masked_position_grad =
                    max_masked_position_grad.max(g0[new.param_index(p, j)].abs());
            }
        }
    }
    Ok(MaskCheck {
        trials,
        objective_changes,
        gradient_changes,
        max_masked_position_grad,
        passed: objective_changes == 0 && gradient_changes == 0 && max_masked_position_grad == 0.0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BanditCheck {
    pub vocab: usize,
    pub rewarded_token: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub window: usize,
    pub trailing_mean_reward: f64,
    pub final_expected_reward: f64,
    pub threshold: f64,
    pub zero_lr_flat: bool,
    pub trajectory: Trajectory,
    pub passed: bool,
}

pub fn bandit_check(config: &VerifyConfig, seed: u64) -> Result<BanditCheck, GrpoError> {
    let target = config.bandit_rewarded_token;
    let reward = move |s: &[usize]| if s[0] == target { 1.0 } else { 0.0 };
    let mut policy = ToyPolicy::uniform(config.bandit_vocab, 1);
    let trajectory = train_step_sim(
        &mut policy,
        &reward,
        config.bandit_lr,
        config.bandit_steps,
        &config.params,
        seed,
    )?;
    let final_expected_reward = policy.probs(0)[target];
    let mut frozen = ToyPolicy::uniform(config.bandit_vocab, 1);
    let flat = train_step_sim(
        &mut frozen,
        &reward,
        0.0,
        config.bandit_steps,
        &config.params,
        seed,
    )?;
    let zero_lr_flat = flat.expected_rewards.windows(2).all(|w| w[0] == w[1]);
    let trailing_mean_reward = trajectory.trailing_mean(config.bandit_window);
    Ok(BanditCheck {
        vocab: config.bandit_vocab,
        rewarded_token: target,
        learning_rate: config.bandit_lr,
        steps: config.bandit_steps,
        window: config.bandit_window,
        trailing_mean_reward,
        final_expected_reward,
        threshold: config.bandit_threshold,
        zero_lr_flat,
        trajectory,
        passed: trailing_mean_reward >= config.bandit_threshold && zero_lr_flat,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub config: VerifyConfig,
    pub gradient: Vec<GradientCheck>,
    pub identity: Vec<IdentityCheck>,
    pub mask: MaskCheck,
    pub bandit: BanditCheck,
    pub passed: bool,
}

pub fn run_verification(config: &VerifyConfig) -> Result<VerifyReport, GrpoError> {
    let mut gradient = Vec::new();
    let mut identity = Vec::new();
    for (i, &(v, l)) in config.shapes.iter().enumerate() {
        let s = derive_seed(config.seed, &format!("shape/{i}"));
        gradient.push(gradient_check(v, l, config, s)?);
        identity.push(identity_check(v, l, config, s)?);
    }
    let mask = mask_invariance_check(config.mask_trials, config, derive_seed(config.seed, "mask"))?;
    let bandit = bandit_check(config, derive_seed(config.seed, "bandit"))?;
    let passed = gradient.iter().all(|g| g.passed)
        && identity.iter().all(|g| g.passed)
        && mask.passed
        && bandit.passed;
    Ok(VerifyReport {
        config: config.clone(),
        gradient,
        identity,
        mask,
        bandit,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = VerifyConfig::default();
        for (i, &(v, l)) in cfg.shapes.iter().enumerate() {
            let g = gradient_check(v, l, &cfg, i as u64).unwrap();
            assert!(g.passed, "{g:?}");
        }
    }

    #[test]
    fn some_tokens_are_clipped() {
        // The check is only meaningful if the clip branch is exercised.
        let cfg = VerifyConfig::default();
        let clipped: usize = (0..4)
            .map(|s| gradient_check(5, 4, &cfg, s).unwrap().clipped_tokens)
            .sum();
        assert!(clipped > 0);
    }

    #[test]
    fn identity_and_mask() {
        let cfg = VerifyConfig::default();
        assert!(identity_check(5, 4, &cfg, 1).unwrap().passed);
        let m = mask_invariance_check(20, &cfg, 2).unwrap();
        assert!(m.passed, "{m:?}");
    }

    #[test]
    fn bandit_learns() {
        let b = bandit_check(&VerifyConfig::default(), 0).unwrap();
        assert!(
            b.passed,
            "trailing {} final {}",
            b.trailing_mean_reward, b.final_expected_reward
        );
    }
}
