//! Generalized advantage estimation and the clipped PPO objective with value
//! and entropy terms.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{entropy, entropy_grad, joint_log_prob, joint_log_prob_grad, step_discount, Agent, AgentTape};
use crate::autoencoder::Autoencoder;
use crate::env::{Sample, SampleGenerator};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Module};
use crate::rollout::{rollout_episode, RolloutConfig, SeededUniforms, Trajectory};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaeConfig {
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for GaeConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
        }
    }
}

impl GaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("gamma", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("gae_lambda", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Advantages and value targets for one trajectory by backward recursion
/// `A_t = delta_t + gamma * lambda * A_{t+1}`; `bootstrap` is `V(s_T)`.
pub fn compute_gae(rewards: &[f64], values: &[f64], bootstrap: f64, cfg: &GaeConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.is_empty() {
        return Err(Error::Precondition("advantage estimation on an empty trajectory".into()));
    }
    if rewards.len() != values.len() {
        return Err(Error::dim(
            "compute_gae",
            format!("{} rewards vs {} values", rewards.len(), values.len()),
        ));
    }
    let t_len = rewards.len();
    let mut adv = vec![0.0; t_len];
    let mut next_value = bootstrap;
    let mut running = 0.0;
    for t in (0..t_len).rev() {
        let delta = rewards[t] + cfg.gamma * next_value - values[t];
        running = delta + cfg.gamma * cfg.lambda * running;
        adv[t] = running;
        next_value = values[t];
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, targets))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            epochs: 4,
            minibatch: 64,
            lr: 3e-4,
            normalize_advantages: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0) {
            return Err(Error::config("clip_eps", "must be > 0"));
        }
        if !(self.value_coef >= 0.0) {
            return Err(Error::config("value_coef", "must be >= 0"));
        }
        if !(self.entropy_coef >= 0.0) {
            return Err(Error::config("entropy_coef", "must be >= 0"));
        }
        if self.minibatch == 0 {
            return Err(Error::config("ppo_minibatch", "must be >= 1"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config("ppo_lr", "must be a finite value >= 0"));
        }
        Ok(())
    }
}

/// One decision ready for optimization.
#[derive(Clone, Debug, PartialEq)]
pub struct BufferEntry {
    pub codes: Matrix,
    pub query: Vec<f64>,
    pub action: Vec<bool>,
    pub step: usize,
    pub old_log_prob: f64,
    pub old_value: f64,
    pub reward: f64,
    pub advantage: f64,
    pub target: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBuffer {
    pub entries: Vec<BufferEntry>,
}

impl RolloutBuffer {
    /// Flattens trajectories, running GAE on each with a terminal value of 0.
    pub fn from_trajectories(trajectories: &[Trajectory], gae: &GaeConfig) -> Result<Self> {
        gae.validate()?;
        let mut entries = Vec::new();
        for traj in trajectories {
            let rewards: Vec<f64> = traj.steps.iter().map(|s| s.reward).collect();
            let values: Vec<f64> = traj.steps.iter().map(|s| s.value).collect();
            let (adv, targets) = compute_gae(&rewards, &values, 0.0, gae)?;
            for ((s, a), tgt) in traj.steps.iter().zip(adv).zip(targets) {
                entries.push(BufferEntry {
                    codes: s.state.codes.clone(),
                    query: s.query.clone(),
                    action: s.action.clone(),
                    step: s.state.step,
                    old_log_prob: s.log_prob,
                    old_value: s.value,
                    reward: s.reward,
                    advantage: a,
                    target: tgt,
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Advantages used by the loss: standardized over the minibatch when
/// enabled (centered only if their spread is zero).
pub fn minibatch_advantages(entries: &[&BufferEntry], normalize: bool) -> Vec<f64> {
    let raw: Vec<f64> = entries.iter().map(|e| e.advantage).collect();
    if !normalize || raw.is_empty() {
        return raw;
    }
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let var = raw.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std > 1e-12 {
        raw.iter().map(|a| (a - mean) / std).collect()
    } else {
        raw.iter().map(|a| a - mean).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoLosses {
    pub l_clip: f64,
    pub l_vf: f64,
    pub entropy: f64,
    pub total: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
}

struct EntryTerms {
    tape: AgentTape,
    ratio: f64,
    unclipped_active: bool,
    objective: f64,
    clipped: bool,
    value_error: f64,
    entropy: f64,
}

fn entry_terms(e: &BufferEntry, index: usize, adv: f64, agent: &Agent, cfg: &PpoConfig, lambda_disc: f64) -> Result<EntryTerms> {
    let tape = agent.forward(&e.codes, &e.query)?;
    let log_prob = joint_log_prob(&tape.probs, &e.action, e.step, lambda_disc);
    let ratio = (log_prob - e.old_log_prob).exp();
    if !ratio.is_finite() {
        return Err(Error::NonFinite {
            name: format!("probability ratio at buffer entry {index} (step {})", e.step),
            phase: "ppo_losses",
        });
    }
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv;
    let c = step_discount(e.step, lambda_disc);
    let discounted: Vec<f64> = tape.probs.iter().map(|p| c * p).collect();
    Ok(EntryTerms {
        ratio,
        unclipped_active: unclipped <= clipped,
        objective: unclipped.min(clipped),
        clipped: (ratio - 1.0).abs() > cfg.clip_eps,
        value_error: tape.value - e.target,
        entropy: entropy(&discounted),
        tape,
    })
}

fn accumulate(sum: &mut PpoLosses, clipped: &mut usize, t: &EntryTerms) {
    sum.l_clip += t.objective;
    sum.l_vf += t.value_error * t.value_error;
    sum.entropy += t.entropy;
    sum.mean_ratio += t.ratio;
    if t.clipped {
        *clipped += 1;
    }
}

fn finish(mut sum: PpoLosses, clipped: usize, m: f64, cfg: &PpoConfig) -> PpoLosses {
    sum.l_clip /= m;
    sum.l_vf /= m;
    sum.entropy /= m;
    sum.mean_ratio /= m;
    sum.clip_fraction = clipped as f64 / m;
    sum.total = -sum.l_clip + cfg.value_coef * sum.l_vf - cfg.entropy_coef * sum.entropy;
    sum
}

fn check_nonempty(entries: &[&BufferEntry]) -> Result<()> {
    if entries.is_empty() {
        return Err(Error::Precondition("PPO loss on an empty minibatch".into()));
    }
    Ok(())
}

/// `L_total = -L_clip + c1 * L_vf - c2 * H` over `entries`.
pub fn ppo_losses(entries: &[&BufferEntry], agent: &Agent, cfg: &PpoConfig, lambda_disc: f64) -> Result<PpoLosses> {
    check_nonempty(entries)?;
    let advantages = minibatch_advantages(entries, cfg.normalize_advantages);
    let mut sum = PpoLosses::default();
    let mut clipped = 0;
    for (i, (e, &adv)) in entries.iter().zip(&advantages).enumerate() {
        accumulate(&mut sum, &mut clipped, &entry_terms(e, i, adv, agent, cfg, lambda_disc)?);
    }
    Ok(finish(sum, clipped, entries.len() as f64, cfg))
}

/// [`ppo_losses`] plus gradient accumulation of `L_total`. Only the
/// unclipped branch of the surrogate carries a policy gradient.
pub fn ppo_loss_backward(entries: &[&BufferEntry], agent: &mut Agent, cfg: &PpoConfig, lambda_disc: f64) -> Result<PpoLosses> {
    check_nonempty(entries)?;
    let m = entries.len() as f64;
    let advantages = minibatch_advantages(entries, cfg.normalize_advantages);
    let mut sum = PpoLosses::default();
    let mut clipped = 0;
    for (i, (e, &adv)) in entries.iter().zip(&advantages).enumerate() {
        let t = entry_terms(e, i, adv, agent, cfg, lambda_disc)?;
        accumulate(&mut sum, &mut clipped, &t);
        let mut dlogits = vec![0.0; t.tape.k()];
        if t.unclipped_active && adv != 0.0 {
            let g = joint_log_prob_grad(&t.tape.probs, &e.action, e.step, lambda_disc);
            for (d, gi) in dlogits.iter_mut().zip(g) {
                *d -= adv * t.ratio * gi / m;
            }
        }
        if cfg.entropy_coef != 0.0 {
            let g = entropy_grad(&t.tape.probs, e.step, lambda_disc);
            for (d, gi) in dlogits.iter_mut().zip(g) {
                *d -= cfg.entropy_coef * gi / m;
            }
        }
        let dvalue = cfg.value_coef * 2.0 * t.value_error / m;
        agent.backward(&t.tape, &dlogits, dvalue);
    }
    Ok(finish(sum, clipped, m, cfg))
}

/// Mean of the per-minibatch losses seen during an update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub losses: PpoLosses,
    pub minibatches: usize,
}

/// `epochs` passes of shuffled minibatch Adam steps on `L_total`.
pub fn ppo_update(
    agent: &mut Agent,
    opt: &mut Adam,
    buffer: &RolloutBuffer,
    cfg: &PpoConfig,
    lambda_disc: f64,
    seed: u64,
) -> Result<UpdateStats> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..buffer.len()).collect();
    let mut sum = PpoLosses::default();
    let mut count = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.minibatch) {
            let mb: Vec<&BufferEntry> = chunk.iter().map(|&i| &buffer.entries[i]).collect();
            agent.zero_grad();
            let l = ppo_loss_backward(&mb, agent, cfg, lambda_disc)?;
            if !l.total.is_finite() {
                return Err(Error::NonFinite {
                    name: "PPO total loss".into(),
                    phase: "ppo_update",
                });
            }
            opt.step(agent.params_mut())?;
            sum.l_clip += l.l_clip;
            sum.l_vf += l.l_vf;
            sum.entropy += l.entropy;
            sum.total += l.total;
            sum.clip_fraction += l.clip_fraction;
            sum.mean_ratio += l.mean_ratio;
            count += 1;
        }
    }
    if count > 0 {
        let n = count as f64;
        sum.l_clip /= n;
        sum.l_vf /= n;
        sum.entropy /= n;
        sum.total /= n;
        sum.clip_fraction /= n;
        sum.mean_ratio /= n;
    }
    Ok(UpdateStats {
        losses: sum,
        minibatches: count,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub iterations: usize,
    pub samples_per_iteration: usize,
    pub rollout: RolloutConfig,
    pub gae: GaeConfig,
    pub ppo: PpoConfig,
    pub seed: u64,
    /// First sample seed of the training stream.
    pub sample_seed_base: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            samples_per_iteration: 32,
            rollout: RolloutConfig::default(),
            gae: GaeConfig::default(),
            ppo: PpoConfig::default(),
            seed: 0,
            sample_seed_base: 3_000_000,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_iteration == 0 {
            return Err(Error::config("rollout_samples", "must be >= 1"));
        }
        self.rollout.validate()?;
        self.gae.validate()?;
        self.ppo.validate()
    }
}

/// One line of the training metric log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iteration: usize,
    /// Mean undiscounted return per trajectory.
    pub mean_reward: f64,
    /// Mean surrogate score after the final step.
    pub mean_score: f64,
    /// Mean tokens retained after the final step.
    pub mean_tokens: f64,
    pub l_clip: f64,
    pub l_vf: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
}

/// Collect rollouts, estimate advantages, update; once per iteration. Each
/// row is passed to `on_row` as soon as it is produced.
pub fn train_rl(
    agent: &mut Agent,
    encoder: &Autoencoder,
    generator: &SampleGenerator,
    cfg: &RlConfig,
    mut on_row: impl FnMut(&MetricRow) -> Result<()>,
) -> Result<Vec<MetricRow>> {
    cfg.validate()?;
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.ppo.lr));
    let mut rows = Vec::with_capacity(cfg.iterations);
    let per = cfg.samples_per_iteration as u64;
    let mut seeder = ChaCha8Rng::seed_from_u64(cfg.seed);
    for iteration in 0..cfg.iterations {
        use rand::Rng;
        let first = cfg.sample_seed_base + iteration as u64 * per;
        let samples: Vec<Sample> = generator.generate_many(first..first + per);
        let uniforms = SeededUniforms { seed: seeder.gen() };
        let mut trajectories = Vec::with_capacity(samples.len());
        for group in samples.chunks(cfg.rollout.reward.batch_size) {
            let refs: Vec<&Sample> = group.iter().collect();
            trajectories.extend(rollout_episode(&refs, encoder, agent, &cfg.rollout, &uniforms)?);
        }
        let buffer = RolloutBuffer::from_trajectories(&trajectories, &cfg.gae)?;
        let stats = ppo_update(agent, &mut opt, &buffer, &cfg.ppo, cfg.rollout.lambda_disc, seeder.gen())?;
        let n = trajectories.len() as f64;
        let row = MetricRow {
            iteration,
            mean_reward: trajectories.iter().map(|t| t.total_reward()).sum::<f64>() / n,
            mean_score: trajectories.iter().map(|t| t.final_score()).sum::<f64>() / n,
            mean_tokens: trajectories.iter().map(|t| t.final_tokens() as f64).sum::<f64>() / n,
            l_clip: stats.losses.l_clip,
            l_vf: stats.losses.l_vf,
            entropy: stats.losses.entropy,
            clip_fraction: stats.losses.clip_fraction,
        };
        log::info!(
            "ppo iteration {iteration}: reward {:.4} score {:.4} tokens {:.2}",
            row.mean_reward,
            row.mean_score,
            row.mean_tokens
        );
        on_row(&row)?;
        rows.push(row);
    }
    Ok(rows)
}
