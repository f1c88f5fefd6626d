//! Group-relative advantages, the clipped token-level surrogate with loss
//! masking, and a toy softmax policy on which both are differentiated.
//!
//! The objective over a group of `G` rollouts is
//!
//! ```text
//! J(θ) = 1/N · Σ_i Σ_{t unmasked} min(ρ_{i,t}·A_i, clip(ρ_{i,t}, 1−ε, 1+ε)·A_i)
//! ρ_{i,t} = exp(log π_θ(o_{i,t}) − log π_old(o_{i,t}))
//! A_i = (r_i − mean(r)) / std(r)            (population std)
//! ```
//!
//! where `N` counts unmasked tokens across the whole group. There is no KL term.

mod verify;

pub use verify::{
    bandit_check, gradient_check, identity_check, mask_invariance_check, run_verification,
    BanditCheck, GradientCheck, IdentityCheck, MaskCheck, VerifyConfig, VerifyReport,
};

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{EventKind, ReasoningTrace};
use crate::seed::rng_for;

#[derive(Debug, thiserror::Error)]
pub enum GrpoError {
    #[error("group needs at least 2 rollouts, got {0}")]
    GroupTooSmall(usize),
    #[error("no unmasked tokens in group")]
    NoUnmaskedTokens,
    #[error("rollout {0} has no advantage")]
    MissingAdvantage(usize),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("rollout {rollout} has {found} tokens, policy length is {expected}")]
    LengthMismatch {
        rollout: usize,
        expected: usize,
        found: usize,
    },
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("steps must be at least 1")]
    ZeroSteps,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoParams {
    pub group_size: usize,
    pub epsilon: f64,
    pub std_epsilon: f64,
}

impl Default for GrpoParams {
    fn default() -> Self {
        Self {
            group_size: 5,
            epsilon: 0.2,
            std_epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub token_id: usize,
    pub logprob_new: f64,
    pub logprob_old: f64,
    /// Retrieved or otherwise injected; excluded from the loss and from `N`.
    pub masked: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub tokens: Vec<TokenRecord>,
    pub reward: f64,
    pub advantage: Option<f64>,
}

impl Rollout {
    pub fn unmasked(&self) -> usize {
        self.tokens.iter().filter(|t| !t.masked).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub query_id: String,
    pub rollouts: Vec<Rollout>,
    pub epsilon: f64,
}

impl RolloutGroup {
    pub fn group_size(&self) -> usize {
        self.rollouts.len()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.reward).collect()
    }

    /// Fills every rollout's advantage from the group's rewards.
    pub fn assign_advantages(&mut self, std_epsilon: f64) -> Result<(), GrpoError> {
        let adv = compute_advantages(&self.rewards(), std_epsilon)?;
        for (r, a) in self.rollouts.iter_mut().zip(adv) {
            r.advantage = Some(a);
        }
        Ok(())
    }

    pub fn unmasked_tokens(&self) -> usize {
        self.rollouts.iter().map(Rollout::unmasked).sum()
    }
}

pub fn compute_advantages(rewards: &[f64], std_epsilon: f64) -> Result<Vec<f64>, GrpoError> {
    let g = rewards.len();
    if g < 2 {
        return Err(GrpoError::GroupTooSmall(g));
    }
    if let Some(bad) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(GrpoError::NonFinite(format!("reward {bad}")));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64;
    let std = var.sqrt();
    if std < std_epsilon {
        return Ok(vec![0.0; g]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

pub fn clipped_term(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// d/dρ of [`clipped_term`]: zero where the clipped branch is active outside the band.
pub fn clipped_term_slope(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped_active = if advantage > 0.0 {
        ratio > 1.0 + epsilon
    } else if advantage < 0.0 {
        ratio < 1.0 - epsilon
    } else {
        true
    };
    if clipped_active {
        0.0
    } else {
        advantage
    }
}

pub fn surrogate_objective(group: &RolloutGroup) -> Result<f64, GrpoError> {
    let n = group.unmasked_tokens();
    if n == 0 {
        return Err(GrpoError::NoUnmaskedTokens);
    }
    let mut total = 0.0;
    for (i, rollout) in group.rollouts.iter().enumerate() {
        let a = rollout.advantage.ok_or(GrpoError::MissingAdvantage(i))?;
        for t in rollout.tokens.iter().filter(|t| !t.masked) {
            total += clipped_term((t.logprob_new - t.logprob_old).exp(), a, group.epsilon);
        }
    }
    Ok(total / n as f64)
}

/// Independent per-position softmax over a vocabulary of `vocab` tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub theta: Vec<f64>,
    pub vocab: usize,
    pub len: usize,
}

impl ToyPolicy {
    pub fn uniform(vocab: usize, len: usize) -> Self {
        assert!(vocab >= 1 && len >= 1, "vocab and len must be positive");
        Self {
            theta: vec![0.0; vocab * len],
            vocab,
            len,
        }
    }

    /// Logits drawn uniformly from `[-scale, scale]`.
    pub fn random(vocab: usize, len: usize, scale: f64, seed: u64) -> Self {
        let mut rng = rng_for(seed, "toy-policy");
        let mut p = Self::uniform(vocab, len);
        for x in &mut p.theta {
            *x = rng.gen_range(-scale..=scale);
        }
        p
    }

    pub fn param_index(&self, position: usize, token: usize) -> usize {
        position * self.vocab + token
    }

    pub fn log_probs(&self, position: usize) -> Vec<f64> {
        let logits = &self.theta[position * self.vocab..(position + 1) * self.vocab];
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        logits.iter().map(|l| l - lse).collect()
    }

    pub fn probs(&self, position: usize) -> Vec<f64> {
        self.log_probs(position).into_iter().map(f64::exp).collect()
    }

    pub fn log_prob(&self, position: usize, token: usize) -> f64 {
        self.log_probs(position)[token]
    }

    /// Exact expectation of `reward_fn` under the policy, by enumerating all
    /// `vocab^len` sequences. `None` when that exceeds `limit` sequences.
    pub fn expected_reward(
        &self,
        reward_fn: &dyn Fn(&[usize]) -> f64,
        limit: usize,
    ) -> Option<f64> {
        let total = (self.vocab as u128).checked_pow(self.len as u32)?;
        if total > limit as u128 {
            return None;
        }
        let probs: Vec<Vec<f64>> = (0..self.len).map(|p| self.probs(p)).collect();
        let mut seq = vec![0usize; self.len];
        let mut acc = 0.0;
        for code in 0..total as usize {
            let mut c = code;
            let mut p = 1.0;
            for (pos, s) in seq.iter_mut().enumerate() {
                *s = c % self.vocab;
                c /= self.vocab;
                p *= probs[pos][*s];
            }
            acc += p * reward_fn(&seq);
        }
        Some(acc)
    }

    fn check_rollout(&self, i: usize, rollout: &Rollout) -> Result<(), GrpoError> {
        if rollout.tokens.len() != self.len {
            return Err(GrpoError::LengthMismatch {
                rollout: i,
                expected: self.len,
                found: rollout.tokens.len(),
            });
        }
        if let Some(t) = rollout.tokens.iter().find(|t| t.token_id >= self.vocab) {
            return Err(GrpoError::TokenOutOfRange {
                token: t.token_id,
                vocab: self.vocab,
            });
        }
        Ok(())
    }
}

/// Samples `G` sequences at temperature 1 with `θ_old = θ`.
///
/// Positions flagged in `mask` are recorded as masked tokens.
pub fn toy_rollout(
    policy: &ToyPolicy,
    reward_fn: &dyn Fn(&[usize]) -> f64,
    mask: &[bool],
    params: &GrpoParams,
    seed: u64,
) -> Result<RolloutGroup, GrpoError> {
    if params.group_size < 2 {
        return Err(GrpoError::GroupTooSmall(params.group_size));
    }
    assert_eq!(
        mask.len(),
        policy.len,
        "mask length must equal policy length"
    );
    let mut rng = rng_for(seed, "toy-rollout");
    let dists: Vec<(Vec<f64>, WeightedIndex<f64>)> = (0..policy.len)
        .map(|p| {
            let probs = policy.probs(p);
            let dist = WeightedIndex::new(&probs).expect("softmax weights are positive");
            (probs.iter().map(|x| x.ln()).collect(), dist)
        })
        .collect();
    let mut rollouts = Vec::with_capacity(params.group_size);
    for _ in 0..params.group_size {
        let seq: Vec<usize> = dists.iter().map(|(_, d)| d.sample(&mut rng)).collect();
        let tokens = seq
            .iter()
            .enumerate()
            .map(|(p, &tok)| {
                let lp = policy.log_prob(p, tok);
                TokenRecord {
                    token_id: tok,
                    logprob_new: lp,
                    logprob_old: lp,
                    masked: mask[p],
                }
            })
            .collect();
        rollouts.push(Rollout {
            tokens,
            reward: reward_fn(&seq),
            advantage: None,
        });
    }
    let mut group = RolloutGroup {
        query_id: format!("toy-{seed}"),
        rollouts,
        epsilon: params.epsilon,
    };
    group.assign_advantages(params.std_epsilon)?;
    Ok(group)
}

/// Copy of `group` with `logprob_new` recomputed under `policy`.
pub fn reevaluate(policy: &ToyPolicy, group: &RolloutGroup) -> Result<RolloutGroup, GrpoError> {
    let mut out = group.clone();
    for (i, r) in out.rollouts.iter_mut().enumerate() {
        policy.check_rollout(i, r)?;
        for (p, t) in r.tokens.iter_mut().enumerate() {
            t.logprob_new = policy.log_prob(p, t.token_id);
        }
    }
    Ok(out)
}

/// `J(θ)` for the group's fixed samples and old log-probabilities.
pub fn objective_at(policy: &ToyPolicy, group: &RolloutGroup) -> Result<f64, GrpoError> {
    surrogate_objective(&reevaluate(policy, group)?)
}

/// Analytic `dJ/dθ`, using `dρ/dθ_{p,j} = ρ · (1[j = o_p] − π_θ(j | p))`.
pub fn surrogate_gradient(policy: &ToyPolicy, group: &RolloutGroup) -> Result<Vec<f64>, GrpoError> {
    let n = group.unmasked_tokens();
    if n == 0 {
        return Err(GrpoError::NoUnmaskedTokens);
    }
    let log_probs: Vec<Vec<f64>> = (0..policy.len).map(|p| policy.log_probs(p)).collect();
    let probs: Vec<Vec<f64>> = log_probs
        .iter()
        .map(|lp| lp.iter().map(|x| x.exp()).collect())
        .collect();
    let mut grad = vec![0.0; policy.theta.len()];
    for (i, rollout) in group.rollouts.iter().enumerate() {
        policy.check_rollout(i, rollout)?;
        let a = rollout.advantage.ok_or(GrpoError::MissingAdvantage(i))?;
        for (p, t) in rollout.tokens.iter().enumerate() {
            if t.masked {
                continue;
            }
            let ratio = (log_probs[p][t.token_id] - t.logprob_old).exp();
            let slope = clipped_term_slope(ratio, a, group.epsilon);
            if slope == 0.0 {
                continue;
            }
            let scale = slope * ratio / n as f64;
            for (j, pj) in probs[p].iter().enumerate() {
                let indicator = if j == t.token_id { 1.0 } else { 0.0 };
                grad[policy.param_index(p, j)] += scale * (indicator - pj);
            }
        }
    }
    Ok(grad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Mean sampled reward of each step's group.
    pub mean_rewards: Vec<f64>,
    /// Exact expected reward of the policy before each step, when enumerable.
    pub expected_rewards: Vec<Option<f64>>,
}

impl Trajectory {
    pub fn trailing_mean(&self, window: usize) -> f64 {
        let w = window.min(self.mean_rewards.len()).max(1);
        let tail = &self.mean_rewards[self.mean_rewards.len() - w..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

/// One group per step, one gradient-ascent update per group at `θ = θ_old`.
pub fn train_step_sim(
    policy: &mut ToyPolicy,
    reward_fn: &dyn Fn(&[usize]) -> f64,
    learning_rate: f64,
    steps: usize,
    params: &GrpoParams,
    seed: u64,
) -> Result<Trajectory, GrpoError> {
    if steps == 0 {
        return Err(GrpoError::ZeroSteps);
    }
    let mask = vec![false; policy.len];
    let mut traj = Trajectory {
        mean_rewards: Vec::with_capacity(steps),
        expected_rewards: Vec::with_capacity(steps),
    };
    for step in 0..steps {
        traj.expected_rewards
            .push(policy.expected_reward(reward_fn, 1 << 16));
        let group = toy_rollout(
            policy,
            reward_fn,
            &mask,
            params,
            crate::seed::derive_seed(seed, &format!("step/{step}")),
        )?;
        let rewards = group.rewards();
        traj.mean_rewards
            .push(rewards.iter().sum::<f64>() / rewards.len() as f64);
        let grad = surrogate_gradient(policy, &group)?;
        for (t, g) in policy.theta.iter_mut().zip(grad) {
            *t += learning_rate * g;
        }
    }
    Ok(traj)
}

/// Output-side events of a trace as one text, with tool-result spans marked.
/// Prompts are conditioning, not rollout output, and are left out.
pub fn rollout_text(trace: &ReasoningTrace) -> Vec<(String, bool)> {
    trace
        .events
        .iter()
        .filter(|e| {
            matches!(
                e.kind,
                EventKind::AssistantText
                    | EventKind::ToolCallIssued
                    | EventKind::ToolResult
                    | EventKind::FinalAnswer
            )
        })
        .map(|e| (e.payload.clone(), e.kind == EventKind::ToolResult))
        .collect()
}

/// Builds a rollout group from agent traces. Tokens are whitespace pieces of
/// the output events; ids index a vocabulary built in order of appearance.
/// Log-probabilities are placeholders (0) to be supplied by the caller.
pub fn export_group(
    query_id: &str,
    episodes: &[(ReasoningTrace, f64)],
    params: &GrpoParams,
) -> Result<RolloutGroup, GrpoError> {
    let mut vocab: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    let mut rollouts = Vec::with_capacity(episodes.len());
    for (trace, reward) in episodes {
        let mut tokens = Vec::new();
        for (text, masked) in rollout_text(trace) {
            for piece in text.split_whitespace() {
                let next = vocab.len();
                let id = *vocab.entry(piece.to_string()).or_insert(next);
                tokens.push(TokenRecord {
                    token_id: id,
                    logprob_new: 0.0,
                    logprob_old: 0.0,
                    masked,
                });
            }
        }
        rollouts.push(Rollout {
            tokens,
            reward: *reward,
            advantage: None,
        });
    }
    let mut group = RolloutGroup {
        query_id: query_id.to_string(),
        rollouts,
        epsilon: params.epsilon,
    };
    group.assign_advantages(params.std_epsilon)?;
    Ok(group)
}
