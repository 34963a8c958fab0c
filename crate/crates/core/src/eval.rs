//! One-shot inference, baseline pruners, the prefill cost model and
//! step-by-step trajectory traces.

use std::collections::BTreeMap;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{deterministic_mask, Agent};
use crate::autoencoder::Autoencoder;
use crate::demos::{retained_count, top_k_indices, HeuristicPruner};
use crate::env::{surrogate_score, Mask, Sample};
use crate::error::{Error, Result};
use crate::rollout::{rollout_episode, RolloutConfig, SeededUniforms};

/// Inference thresholds swept by default: nine even points and the three
/// reference settings.
pub const DEFAULT_TAU_GRID: [f64; 12] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.55, 0.6, 0.67, 0.7, 0.74, 0.8, 0.9];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauPoint {
    pub tau: f64,
    pub mean_tokens: f64,
    pub mean_score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub mean_score: f64,
    pub mean_retained: f64,
    /// `mean_retained / N`.
    pub retention_rate: f64,
    /// Mean score with every token kept.
    pub full_score: f64,
    pub per_tau: Vec<TauPoint>,
    pub baselines: BTreeMap<String, f64>,
}

impl EvalReport {
    /// Score as a percentage of the full-mask score.
    pub fn relative_score(&self) -> f64 {
        if self.full_score == 0.0 {
            0.0
        } else {
            100.0 * self.mean_score / self.full_score
        }
    }

    fn from_masks(samples: &[Sample], masks: &[Mask], kappa: f64) -> Self {
        let n = samples.len() as f64;
        let tokens = samples[0].n_tokens() as f64;
        let mut score = 0.0;
        let mut full = 0.0;
        let mut kept = 0.0;
        for (s, m) in samples.iter().zip(masks) {
            score += surrogate_score(m, &s.relevant, kappa);
            full += surrogate_score(&Mask::full(s.n_tokens()), &s.relevant, kappa);
            kept += m.count() as f64;
        }
        EvalReport {
            samples: samples.len(),
            mean_score: score / n,
            mean_retained: kept / n,
            retention_rate: kept / n / tokens,
            full_score: full / n,
            per_tau: Vec::new(),
            baselines: BTreeMap::new(),
        }
    }
}

fn require_samples(samples: &[Sample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Precondition("evaluation needs at least one sample".into()));
    }
    Ok(())
}

fn check_rate(rate: f64) -> Result<()> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::config("retention_rate", "must lie in (0, 1]"));
    }
    Ok(())
}

/// Raw retention probabilities of every original token, in one pass.
pub fn inference_probs(agent: &Agent, encoder: &Autoencoder, sample: &Sample) -> Result<Vec<f64>> {
    let codes = encoder.encode(&sample.tokens)?;
    Ok(agent.forward(&codes, &sample.query)?.probs)
}

/// `p_i > tau`, with the most probable token kept if nothing passes.
pub fn threshold_mask(probs: &[f64], tau: f64) -> Mask {
    let mut bits = deterministic_mask(probs, tau);
    if !bits.iter().any(|b| *b) && !bits.is_empty() {
        bits[top_k_indices(probs, 1)[0]] = true;
    }
    Mask::from_bits(bits)
}

/// One-shot pruning at threshold `tau`, scored on the original tokens.
pub fn evaluate(agent: &Agent, encoder: &Autoencoder, samples: &[Sample], tau: f64, kappa: f64) -> Result<EvalReport> {
    require_samples(samples)?;
    let masks = samples
        .iter()
        .map(|s| Ok(threshold_mask(&inference_probs(agent, encoder, s)?, tau)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_masks(samples, &masks, kappa))
}

/// Keeps the `ceil(N * rate)` most probable tokens of every sample.
pub fn evaluate_at_rate(agent: &Agent, encoder: &Autoencoder, samples: &[Sample], rate: f64, kappa: f64) -> Result<EvalReport> {
    require_samples(samples)?;
    check_rate(rate)?;
    let masks = samples
        .iter()
        .map(|s| {
            let p = inference_probs(agent, encoder, s)?;
            let keep = retained_count(s.n_tokens(), 1.0 - rate);
            Ok(Mask::from_indices(s.n_tokens(), &top_k_indices(&p, keep)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_masks(samples, &masks, kappa))
}

/// Mean tokens and score at each threshold.
pub fn tau_sweep(agent: &Agent, encoder: &Autoencoder, samples: &[Sample], taus: &[f64], kappa: f64) -> Result<Vec<TauPoint>> {
    require_samples(samples)?;
    let probs = samples
        .iter()
        .map(|s| inference_probs(agent, encoder, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(taus
        .iter()
        .map(|&tau| {
            let masks: Vec<Mask> = probs.iter().map(|p| threshold_mask(p, tau)).collect();
            let r = EvalReport::from_masks(samples, &masks, kappa);
            TauPoint {
                tau,
                mean_tokens: r.mean_retained,
                mean_score: r.mean_score,
            }
        })
        .collect())
}

/// Uniformly random masks of exactly `ceil(N * rate)` tokens.
pub fn baseline_random(samples: &[Sample], rate: f64, seed: u64, kappa: f64) -> Result<EvalReport> {
    require_samples(samples)?;
    check_rate(rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks: Vec<Mask> = samples
        .iter()
        .map(|s| {
            let n = s.n_tokens();
            let keep = retained_count(n, 1.0 - rate);
            Mask::from_indices(n, &sample_indices(&mut rng, n, keep).into_vec())
        })
        .collect();
    Ok(EvalReport::from_masks(samples, &masks, kappa))
}

/// Query-similarity top-k masks of exactly `ceil(N * rate)` tokens.
pub fn baseline_heuristic(samples: &[Sample], pruner: &HeuristicPruner<'_>, rate: f64, kappa: f64) -> Result<EvalReport> {
    require_samples(samples)?;
    check_rate(rate)?;
    let masks = samples
        .iter()
        .map(|s| Ok(Mask::from_indices(s.n_tokens(), &pruner.top_fraction(s, rate)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_masks(samples, &masks, kappa))
}

/// Inference cost decomposition; prefill is `2 P (N_v' + N_t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsModel {
    /// Backbone parameter count `P`.
    pub params: f64,
    /// Visual tokens passed to the backbone, `N_v'`.
    pub visual_tokens: f64,
    /// Text tokens, `N_t`.
    pub text_tokens: f64,
    pub vision_cost: f64,
    pub pruner_cost: f64,
    pub decode_cost: f64,
}

impl FlopsModel {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("flops_params", self.params),
            ("visual_tokens", self.visual_tokens),
            ("text_tokens", self.text_tokens),
            ("vision_cost", self.vision_cost),
            ("pruner_cost", self.pruner_cost),
            ("decode_cost", self.decode_cost),
        ];
        for (key, v) in fields {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(key, "must be a finite value >= 0"));
            }
        }
        Ok(())
    }

    pub fn prefill(&self) -> f64 {
        2.0 * self.params * (self.visual_tokens + self.text_tokens)
    }
}

pub fn flops_estimate(model: &FlopsModel) -> Result<f64> {
    model.validate()?;
    Ok(model.vision_cost + model.pruner_cost + model.prefill() + model.decode_cost)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    /// Mask over original tokens as a `0`/`1` string.
    pub mask: String,
    pub retained: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub sample_seed: u64,
    /// Step 0 is the unpruned sample; step `t` follows the `t`-th decision.
    pub steps: Vec<TraceStep>,
}

/// Stochastic multi-step rollout of one sample, recorded step by step.
pub fn trace(agent: &Agent, encoder: &Autoencoder, sample: &Sample, cfg: &RolloutConfig, seed: u64) -> Result<TraceRecord> {
    let traj = rollout_episode(&[sample], encoder, agent, cfg, &SeededUniforms { seed })?
        .pop()
        .expect("one trajectory per sample");
    let n = sample.n_tokens();
    let mut steps = vec![TraceStep {
        step: 0,
        mask: Mask::full(n).to_bit_string(),
        retained: n,
        score: traj.initial_score,
    }];
    for s in &traj.steps {
        let next = s.state.apply_action(&s.action)?;
        steps.push(TraceStep {
            step: next.step,
            mask: next.mask.to_bit_string(),
            retained: next.k(),
            score: s.score,
        });
    }
    Ok(TraceRecord {
        sample_seed: sample.seed,
        steps,
    })
}
