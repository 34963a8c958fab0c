//! Multi-step stochastic pruning episodes: the agent samples a joint
//! Bernoulli action at each step, the environment applies it and hands out
//! rewards.

use serde::{Deserialize, Serialize};

use crate::agent::{joint_log_prob, sample_actions, token_uniform, Agent};
use crate::autoencoder::Autoencoder;
use crate::env::{sample_reward, surrogate_score, PruningState, RewardConfig, RewardMode, Sample};
use crate::error::{Error, Result};

/// Source of the per-token uniforms that drive Bernoulli sampling.
pub trait UniformSource {
    /// Uniform in `[0, 1)` for original token `index` of `sample_seed` at `step`.
    fn uniform(&self, sample_seed: u64, index: usize, step: usize) -> f64;
}

/// Hash-keyed streams: each `(run seed, sample seed, token, step)` gets its own draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeededUniforms {
    pub seed: u64,
}

impl UniformSource for SeededUniforms {
    fn uniform(&self, sample_seed: u64, index: usize, step: usize) -> f64 {
        let key = self.seed.wrapping_mul(0xD6E8_FEB8_6659_FD93) ^ sample_seed;
        token_uniform(key, index, step)
    }
}

/// Always draws 0, so every token with positive retention probability is kept.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AlwaysRetain;

impl UniformSource for AlwaysRetain {
    fn uniform(&self, _: u64, _: usize, _: usize) -> f64 {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub t_max: usize,
    pub lambda_disc: f64,
    pub reward: RewardConfig,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            t_max: 3,
            lambda_disc: 0.5,
            reward: RewardConfig::default(),
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 {
            return Err(Error::config("t_max", "must be >= 1"));
        }
        if !(self.lambda_disc > 0.0 && self.lambda_disc < 1.0) {
            return Err(Error::config("lambda_disc", "must lie in (0, 1)"));
        }
        self.reward.validate()
    }
}

/// One decision: the state it was taken in, what was done, and what came of it.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub state: PruningState,
    pub query: Vec<f64>,
    pub action: Vec<bool>,
    /// Joint log-probability of `action` at decision time.
    pub log_prob: f64,
    /// Value estimate of `state` at decision time.
    pub value: f64,
    pub reward: f64,
    pub done: bool,
    /// Surrogate score of the mask after the action.
    pub score: f64,
    /// The sampled action kept nothing and the floor token was forced back in.
    pub floor_applied: bool,
}

impl StepRecord {
    pub fn retained_after(&self) -> usize {
        self.action.iter().filter(|b| **b).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub sample_seed: u64,
    /// Score of the unpruned sample, the baseline for the first reward.
    pub initial_score: f64,
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn final_score(&self) -> f64 {
        self.steps.last().map_or(self.initial_score, |s| s.score)
    }

    pub fn final_tokens(&self) -> usize {
        self.steps.last().map_or(0, |s| s.retained_after())
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// Index of the largest probability, ties to the lower index.
fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Runs one episode per sample in lockstep for up to `t_max` steps.
///
/// An action that would keep no tokens has its highest-probability token
/// forced back to retained; that step's log-probability describes the
/// corrected action and the episode ends there. In batch-mean reward mode
/// every sample still active at a step receives the mean of their rewards.
pub fn rollout_episode(
    samples: &[&Sample],
    encoder: &Autoencoder,
    agent: &Agent,
    cfg: &RolloutConfig,
    uniforms: &dyn UniformSource,
) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    let mut states = Vec::with_capacity(samples.len());
    let mut trajectories = Vec::with_capacity(samples.len());
    for sample in samples {
        let state = PruningState::initial(encoder.encode(&sample.tokens)?);
        trajectories.push(Trajectory {
            sample_seed: sample.seed,
            initial_score: surrogate_score(&state.mask, &sample.relevant, cfg.reward.kappa),
            steps: Vec::with_capacity(cfg.t_max),
        });
        states.push(Some(state));
    }

    for t in 0..cfg.t_max {
        let mut fresh = Vec::new();
        for (b, slot) in states.iter_mut().enumerate() {
            let Some(state) = slot.take() else { continue };
            let sample = samples[b];
            let tape = agent.forward(&state.codes, &sample.query)?;
            let draws: Vec<f64> = state
                .index_map
                .iter()
                .map(|&i| uniforms.uniform(sample.seed, i, t))
                .collect();
            let mut action = sample_actions(&tape.probs, t, cfg.lambda_disc, &draws);
            let floor_applied = !action.bits.iter().any(|b| *b);
            if floor_applied {
                let keep = argmax(&tape.probs);
                action.bits[keep] = true;
                action.joint_log_prob = joint_log_prob(&tape.probs, &action.bits, t, cfg.lambda_disc);
                log::debug!("token floor applied for sample {} at step {t}", sample.seed);
            }
            let next = state.apply_action(&action.bits)?;
            let reward = sample_reward(&state, &next, sample, &cfg.reward)?;
            let score = surrogate_score(&next.mask, &sample.relevant, cfg.reward.kappa);
            let done = floor_applied || t + 1 == cfg.t_max;
            trajectories[b].steps.push(StepRecord {
                state,
                query: sample.query.clone(),
                action: action.bits,
                log_prob: action.joint_log_prob,
                value: tape.value,
                reward,
                done,
                score,
                floor_applied,
            });
            fresh.push(b);
            if !done {
                *slot = Some(next);
            }
        }
        if fresh.is_empty() {
            break;
        }
        if cfg.reward.mode == RewardMode::BatchMean {
            let mean = fresh
                .iter()
                .map(|&b| trajectories[b].steps[t].reward)
                .sum::<f64>()
                / fresh.len() as f64;
            for &b in &fresh {
                trajectories[b].steps[t].reward = mean;
            }
        }
    }
    Ok(trajectories)
}
