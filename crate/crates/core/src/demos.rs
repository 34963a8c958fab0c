//! Heuristic reference pruner, demonstration trajectories, and supervised
//! pretraining of the policy by binary cross-entropy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{Agent, PROB_CLAMP};
use crate::autoencoder::{split_indices, Autoencoder};
use crate::env::{Sample, SampleGenerator};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Module};
use crate::tensor::Matrix;

/// Cosine similarity of every row with `direction`; zero-norm rows (or a
/// zero direction) score 0.
pub fn heuristic_relevance(codes: &Matrix, direction: &[f64]) -> Vec<f64> {
    let dn = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    (0..codes.rows())
        .map(|r| {
            let row = codes.row(r);
            let rn = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if rn == 0.0 || dn == 0.0 {
                return 0.0;
            }
            row.iter().zip(direction).map(|(a, b)| a * b).sum::<f64>() / (rn * dn)
        })
        .collect()
}

/// Indices of the `keep` highest scores, ties going to the lower index,
/// returned in increasing index order.
pub fn top_k_indices(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order.into_iter().take(keep).collect();
    kept.sort_unstable();
    kept
}

/// `ceil(n * (1 - rate))`, robust to representation error in `rate`.
pub fn retained_count(n: usize, rate: f64) -> usize {
    ((n as f64 * (1.0 - rate)) - 1e-9).ceil().max(0.0) as usize
}

/// Query-similarity reference pruner working in code space.
///
/// The query is mapped to token space by the generator's query direction,
/// scaled to the planted signal strength and encoded; its offset from the
/// code of the zero token is the relevance direction. Token codes are
/// measured from the same origin.
#[derive(Clone, Debug)]
pub struct HeuristicPruner<'a> {
    encoder: &'a Autoencoder,
    generator: &'a SampleGenerator,
    origin: Vec<f64>,
}

impl<'a> HeuristicPruner<'a> {
    pub fn new(encoder: &'a Autoencoder, generator: &'a SampleGenerator) -> Result<Self> {
        if !encoder.is_frozen() {
            return Err(Error::State("heuristic pruner needs a frozen encoder".into()));
        }
        if encoder.input_dim() != generator.config().token_dim {
            return Err(Error::dim(
                "heuristic_pruner",
                format!(
                    "encoder input {} vs token dimension {}",
                    encoder.input_dim(),
                    generator.config().token_dim
                ),
            ));
        }
        let origin = encoder
            .encode(&Matrix::zeros(1, encoder.input_dim()))?
            .into_vec();
        Ok(Self {
            encoder,
            generator,
            origin,
        })
    }

    pub fn encoder(&self) -> &Autoencoder {
        self.encoder
    }

    /// Code-space relevance direction of a query.
    pub fn query_direction(&self, query: &[f64]) -> Vec<f64> {
        let strength = match self.generator.config().signal_strength {
            s if s > 0.0 => s,
            _ => 1.0,
        };
        let u: Vec<f64> = self
            .generator
            .direction(query)
            .into_iter()
            .map(|v| v * strength)
            .collect();
        let code = self
            .encoder
            .encode(&Matrix::row_vector(&u))
            .expect("encoder width checked at construction")
            .into_vec();
        code.iter().zip(&self.origin).map(|(c, o)| c - o).collect()
    }

    fn centered(&self, codes: &Matrix) -> Matrix {
        let mut c = codes.clone();
        for r in 0..c.rows() {
            for (v, o) in c.row_mut(r).iter_mut().zip(&self.origin) {
                *v -= o;
            }
        }
        c
    }

    /// Relevance of each row of `codes` to `query`.
    pub fn relevance(&self, codes: &Matrix, query: &[f64]) -> Vec<f64> {
        heuristic_relevance(&self.centered(codes), &self.query_direction(query))
    }

    /// Mask keeping the `ceil(N * rate)` most relevant original tokens.
    pub fn top_fraction(&self, sample: &Sample, retention_rate: f64) -> Result<Vec<usize>> {
        let codes = self.encoder.encode(&sample.tokens)?;
        let scores = self.relevance(&codes, &sample.query);
        let keep = retained_count(sample.n_tokens(), 1.0 - retention_rate).max(1);
        Ok(top_k_indices(&scores, keep))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeuristicConfig {
    /// Cumulative pruning rates, strictly increasing, each in `[0, 1)`.
    pub rates: Vec<f64>,
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        Self {
            rates: vec![0.25, 0.50],
        }
    }
}

impl HeuristicConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rates.is_empty() {
            return Err(Error::config("demo_rates", "at least one pruning rate is required"));
        }
        if self.rates.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::config("demo_rates", "each rate must lie in [0, 1)"));
        }
        if self.rates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("demo_rates", "rates must be strictly increasing"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoStep {
    /// `K_t x d_l` codes of the surviving tokens.
    pub codes: Matrix,
    /// Original index of each surviving row, increasing.
    pub index_map: Vec<usize>,
    /// `true` where the reference pruner keeps the token at this step.
    pub labels: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoTrajectory {
    pub seed: u64,
    pub query: Vec<f64>,
    pub steps: Vec<DemoStep>,
}

impl DemoTrajectory {
    pub fn token_count(&self) -> usize {
        self.steps.iter().map(|s| s.labels.len()).sum()
    }
}

/// Runs the reference pruner at each cumulative rate over the original `N`
/// tokens; step `t` labels which of its surviving tokens are kept at `t+1`.
pub fn generate_demo(sample: &Sample, pruner: &HeuristicPruner<'_>, cfg: &HeuristicConfig) -> Result<DemoTrajectory> {
    cfg.validate()?;
    let n = sample.n_tokens();
    let codes = pruner.encoder().encode(&sample.tokens)?;
    let scores = pruner.relevance(&codes, &sample.query);
    let mut survivors: Vec<usize> = (0..n).collect();
    let mut steps = Vec::with_capacity(cfg.rates.len());
    for &rate in &cfg.rates {
        let keep = retained_count(n, rate);
        if keep == 0 {
            return Err(Error::config(
                "demo_rates",
                format!("rate {rate} retains no tokens out of {n}"),
            ));
        }
        let kept = top_k_indices(&scores, keep);
        let labels = survivors.iter().map(|i| kept.binary_search(i).is_ok()).collect();
        steps.push(DemoStep {
            codes: codes.select_rows(&survivors),
            index_map: survivors.clone(),
            labels,
        });
        survivors = kept;
    }
    Ok(DemoTrajectory {
        seed: sample.seed,
        query: sample.query.clone(),
        steps,
    })
}

/// How the summed token cross-entropy is scaled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BceNormalization {
    /// Divide by the number of trajectories only.
    PerTrajectory,
    /// Divide by the total number of labelled tokens.
    PerToken,
}

fn bce_scale(demos: &[DemoTrajectory], norm: BceNormalization) -> f64 {
    match norm {
        BceNormalization::PerTrajectory => 1.0 / demos.len() as f64,
        BceNormalization::PerToken => 1.0 / demos.iter().map(|d| d.token_count()).sum::<usize>().max(1) as f64,
    }
}

fn token_bce(p: f64, label: bool) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if label {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

pub fn bce_loss(agent: &Agent, demos: &[DemoTrajectory], norm: BceNormalization) -> Result<f64> {
    if demos.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for demo in demos {
        for step in &demo.steps {
            let tape = agent.forward(&step.codes, &demo.query)?;
            total += tape
                .probs
                .iter()
                .zip(&step.labels)
                .map(|(&p, &a)| token_bce(p, a))
                .sum::<f64>();
        }
    }
    Ok(total * bce_scale(demos, norm))
}

/// [`bce_loss`] plus gradient accumulation into the agent's parameters.
pub fn bce_backward(agent: &mut Agent, demos: &[DemoTrajectory], norm: BceNormalization) -> Result<f64> {
    if demos.is_empty() {
        return Ok(0.0);
    }
    let scale = bce_scale(demos, norm);
    let mut total = 0.0;
    for demo in demos {
        for step in &demo.steps {
            let tape = agent.forward(&step.codes, &demo.query)?;
            let mut dlogits = Vec::with_capacity(tape.k());
            for (&p, &a) in tape.probs.iter().zip(&step.labels) {
                total += token_bce(p, a);
                let inside = (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p);
                let target = if a { 1.0 } else { 0.0 };
                dlogits.push(if inside { (p - target) * scale } else { 0.0 });
            }
            agent.backward(&tape, &dlogits, 0.0);
        }
    }
    Ok(total * scale)
}

/// Fraction of labelled tokens where `(p > 0.5) == label`.
pub fn label_agreement(agent: &Agent, demos: &[DemoTrajectory]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for demo in demos {
        for step in &demo.steps {
            let tape = agent.forward(&step.codes, &demo.query)?;
            hits += tape
                .probs
                .iter()
                .zip(&step.labels)
                .filter(|(&p, &a)| (p > 0.5) == a)
                .count();
            total += step.labels.len();
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// No-signal control: each step's labels are replaced by a random
/// arrangement of `ceil(K/2)` ones, independent of the token features.
pub fn randomize_labels(demos: &[DemoTrajectory], seed: u64) -> Vec<DemoTrajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    demos
        .iter()
        .map(|d| {
            let mut d = d.clone();
            for step in &mut d.steps {
                let k = step.labels.len();
                let mut labels: Vec<bool> = (0..k).map(|i| i < k.div_ceil(2)).collect();
                labels.shuffle(&mut rng);
                step.labels = labels;
            }
            d
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Trajectories per optimizer step.
    pub batch_trajectories: usize,
    pub normalization: BceNormalization,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-3,
            batch_trajectories: 16,
            normalization: BceNormalization::PerTrajectory,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    /// 0 is the initialization.
    pub epoch: usize,
    pub train_loss: f64,
    pub held_out_loss: f64,
    pub held_out_agreement: f64,
}

/// Minibatch Adam on the BCE objective over the 90% split; held-out loss and
/// agreement are reported before training and after every epoch.
pub fn pretrain_policy(
    mut agent: Agent,
    demos: &[DemoTrajectory],
    cfg: &PretrainConfig,
) -> Result<(Agent, Vec<PretrainEpoch>)> {
    if demos.is_empty() {
        return Err(Error::Precondition("no demonstrations to pretrain on".into()));
    }
    let (train, held) = split_indices(demos.len());
    let held_out: Vec<DemoTrajectory> = held.iter().map(|&i| demos[i].clone()).collect();
    let train_set: Vec<&DemoTrajectory> = train.iter().map(|&i| &demos[i]).collect();
    let mut log = vec![PretrainEpoch {
        epoch: 0,
        train_loss: f64::NAN,
        held_out_loss: bce_loss(&agent, &held_out, cfg.normalization)?,
        held_out_agreement: label_agreement(&agent, &held_out)?,
    }];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let batch = cfg.batch_trajectories.max(1);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            let mb: Vec<DemoTrajectory> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            agent.zero_grad();
            let loss = bce_backward(&mut agent, &mb, cfg.normalization)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    name: format!("bce loss (epoch {epoch})"),
                    phase: "pretrain_policy",
                });
            }
            opt.step(agent.params_mut())?;
            loss_sum += loss;
            batches += 1;
        }
        let entry = PretrainEpoch {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            held_out_loss: bce_loss(&agent, &held_out, cfg.normalization)?,
            held_out_agreement: label_agreement(&agent, &held_out)?,
        };
        log::info!(
            "pretrain epoch {epoch}: train {:.4} held-out {:.4} agreement {:.4}",
            entry.train_loss,
            entry.held_out_loss,
            entry.held_out_agreement
        );
        log.push(entry);
    }
    Ok((agent, log))
}
