//! The pruning MDP: synthetic samples with a planted relevant set, the
//! surrogate task score, mask bookkeeping over original token indices, and
//! the composite task/efficiency reward.

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Retention mask over the original token indices; `true` = retained.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask(Vec<bool>);

impl Mask {
    pub fn full(n: usize) -> Self {
        Mask(vec![true; n])
    }

    pub fn empty(n: usize) -> Self {
        Mask(vec![false; n])
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Mask(bits)
    }

    pub fn from_indices(n: usize, retained: &[usize]) -> Self {
        let mut bits = vec![false; n];
        for &i in retained {
            bits[i] = true;
        }
        Mask(bits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    /// Retained original indices in increasing order.
    pub fn indices(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    /// `self AND other == self`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(a, b)| !*a || *b)
    }

    /// `0`/`1` string, index 0 first.
    pub fn to_bit_string(&self) -> String {
        self.0.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_tokens: usize,
    pub token_dim: usize,
    pub query_dim: usize,
    pub n_relevant: usize,
    pub signal_strength: f64,
    /// Rank of the token-space subspace that query directions live in.
    pub signal_rank: usize,
    pub projection_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_tokens: 64,
            token_dim: 64,
            query_dim: 16,
            n_relevant: 16,
            signal_strength: 3.0,
            signal_rank: 4,
            projection_seed: 0x5eed_0001,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tokens == 0 || self.token_dim == 0 || self.query_dim == 0 {
            return Err(Error::config("n_tokens", "token count and dimensions must be positive"));
        }
        if self.n_relevant == 0 || self.n_relevant > self.n_tokens {
            return Err(Error::config(
                "n_relevant",
                format!("must lie in 1..={}", self.n_tokens),
            ));
        }
        if !(self.signal_strength >= 0.0) || !self.signal_strength.is_finite() {
            return Err(Error::config("signal_strength", "must be a finite value >= 0"));
        }
        if self.signal_rank == 0 || self.signal_rank > self.token_dim.min(self.query_dim) {
            return Err(Error::config(
                "signal_rank",
                "must lie in 1..=min(token_dim, query_dim)",
            ));
        }
        Ok(())
    }
}

/// One image/question stand-in: `N x d_v` tokens, a query embedding, and the
/// planted set of task-relevant token indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub seed: u64,
    pub tokens: Matrix,
    pub query: Vec<f64>,
    /// Sorted, distinct, `< N`.
    pub relevant: Vec<usize>,
}

impl Sample {
    pub fn n_tokens(&self) -> usize {
        self.tokens.rows()
    }
}

/// Draws samples whose relevant tokens are `signal_strength * u(q) + noise`,
/// where `u(q)` is a fixed linear map of the query normalized to unit length,
/// and whose other tokens are pure unit Gaussian noise.
#[derive(Clone, Debug)]
pub struct SampleGenerator {
    config: GeneratorConfig,
    /// `query_dim x token_dim`, rank `signal_rank`.
    projection: Matrix,
}

impl SampleGenerator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.projection_seed);
        let r = config.signal_rank;
        let mix = gaussian(config.query_dim, r, &mut rng);
        let basis = orthonormal_rows(r, config.token_dim, &mut rng);
        let projection = mix.mm(&basis);
        Ok(Self { config, projection })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Unit-length token-space direction `u(q)`; zero for a query in the
    /// projection's null space.
    pub fn direction(&self, query: &[f64]) -> Vec<f64> {
        let u = Matrix::row_vector(query).mm(&self.projection).into_vec();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            u
        } else {
            u.into_iter().map(|v| v / norm).collect()
        }
    }

    pub fn generate(&self, seed: u64) -> Sample {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let query: Vec<f64> = (0..c.query_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut relevant = sample_indices(&mut rng, c.n_tokens, c.n_relevant).into_vec();
        relevant.sort_unstable();
        let mut tokens = gaussian(c.n_tokens, c.token_dim, &mut rng);
        let u = self.direction(&query);
        for &i in &relevant {
            for (t, ui) in tokens.row_mut(i).iter_mut().zip(&u) {
                *t += c.signal_strength * ui;
            }
        }
        Sample {
            seed,
            tokens,
            query,
            relevant,
        }
    }

    pub fn generate_many(&self, seeds: impl IntoIterator<Item = u64>) -> Vec<Sample> {
        seeds.into_iter().map(|s| self.generate(s)).collect()
    }
}

/// Free-standing form of [`SampleGenerator::generate`] using the default
/// projection seed and signal rank.
pub fn generate_sample(
    seed: u64,
    n_tokens: usize,
    token_dim: usize,
    query_dim: usize,
    n_relevant: usize,
    signal_strength: f64,
) -> Result<Sample> {
    let defaults = GeneratorConfig::default();
    let cfg = GeneratorConfig {
        n_tokens,
        token_dim,
        query_dim,
        n_relevant,
        signal_strength,
        signal_rank: defaults.signal_rank.min(token_dim).min(query_dim),
        projection_seed: defaults.projection_seed,
    };
    Ok(SampleGenerator::new(cfg)?.generate(seed))
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

/// Gram-Schmidt on Gaussian rows.
fn orthonormal_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = gaussian(rows, cols, rng);
    for r in 0..rows {
        for p in 0..r {
            let dot: f64 = m.row(r).iter().zip(m.row(p)).map(|(a, b)| a * b).sum();
            let prev = m.row(p).to_vec();
            for (a, b) in m.row_mut(r).iter_mut().zip(&prev) {
                *a -= dot * b;
            }
        }
        let norm = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        m.row_mut(r).iter_mut().for_each(|v| *v /= norm);
    }
    m
}

/// Stand-in for downstream task performance on the retained original tokens:
/// `recall / (1 + kappa * clutter)` against the planted relevant set, where
/// clutter is the retained fraction outside that set. Empty mask scores 0.
pub fn surrogate_score(mask: &Mask, relevant: &[usize], kappa: f64) -> f64 {
    let retained = mask.count();
    if retained == 0 || relevant.is_empty() {
        return 0.0;
    }
    let hits = relevant.iter().filter(|&&i| mask.get(i)).count();
    let recall = hits as f64 / relevant.len() as f64;
    let clutter = (retained - hits) as f64 / retained as f64;
    recall / (1.0 + kappa * clutter)
}

/// MDP state: codes of the surviving tokens, the mask over original indices,
/// and the original index of each surviving row.
#[derive(Clone, Debug, PartialEq)]
pub struct PruningState {
    pub codes: Matrix,
    pub mask: Mask,
    pub index_map: Vec<usize>,
    pub step: usize,
}

impl PruningState {
    pub fn initial(codes: Matrix) -> Self {
        let n = codes.rows();
        Self {
            codes,
            mask: Mask::full(n),
            index_map: (0..n).collect(),
            step: 0,
        }
    }

    /// Number of surviving tokens, `K_t`.
    pub fn k(&self) -> usize {
        self.index_map.len()
    }

    /// Keeps rows with a set bit (in their current order) and clears the mask
    /// at the original index of every dropped row.
    pub fn apply_action(&self, action: &[bool]) -> Result<PruningState> {
        if action.len() != self.k() {
            return Err(Error::dim(
                "apply_action",
                format!("action has {} bits for {} surviving tokens", action.len(), self.k()),
            ));
        }
        let keep: Vec<usize> = action
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect();
        let mut mask = self.mask.clone();
        for (i, &b) in action.iter().enumerate() {
            if !b {
                mask.0[self.index_map[i]] = false;
            }
        }
        Ok(PruningState {
            codes: self.codes.select_rows(&keep),
            mask,
            index_map: keep.iter().map(|&i| self.index_map[i]).collect(),
            step: self.step + 1,
        })
    }
}

/// Whether each sample is credited with its own reward or the batch mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardMode {
    PerSample,
    BatchMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    pub batch_size: usize,
    pub mode: RewardMode,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            kappa: 0.25,
            batch_size: 8,
            mode: RewardMode::PerSample,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::config("alpha", "must be >= 0"));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::config("beta", "must be >= 0"));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::config("kappa", "must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("reward_batch", "must be >= 1"));
        }
        Ok(())
    }
}

/// Efficiency term `1 - K_t / K_{t-1}` for one transition.
pub fn efficiency_gain(prev_k: usize, next_k: usize) -> Result<f64> {
    if prev_k == 0 {
        return Err(Error::DegenerateState("previous state has no tokens".into()));
    }
    Ok(1.0 - next_k as f64 / prev_k as f64)
}

/// `alpha * (Score_t - Score_{t-1}) + beta * (1 - K_t / K_{t-1})` for one sample.
pub fn sample_reward(prev: &PruningState, next: &PruningState, sample: &Sample, cfg: &RewardConfig) -> Result<f64> {
    let eff = efficiency_gain(prev.k(), next.k())?;
    let before = surrogate_score(&prev.mask, &sample.relevant, cfg.kappa);
    let after = surrogate_score(&next.mask, &sample.relevant, cfg.kappa);
    Ok(cfg.alpha * (after - before) + cfg.beta * eff)
}

/// Batch reward: task and efficiency terms averaged over the `B` transitions.
pub fn reward_step(
    prev_states: &[&PruningState],
    next_states: &[&PruningState],
    samples: &[&Sample],
    cfg: &RewardConfig,
) -> Result<f64> {
    let b = prev_states.len();
    if b == 0 || next_states.len() != b || samples.len() != b {
        return Err(Error::dim(
            "reward_step",
            format!(
                "{} previous states, {} next states, {} samples",
                b,
                next_states.len(),
                samples.len()
            ),
        ));
    }
    let mut task = 0.0;
    let mut eff = 0.0;
    for ((prev, next), sample) in prev_states.iter().zip(next_states).zip(samples) {
        eff += efficiency_gain(prev.k(), next.k())?;
        task += surrogate_score(&next.mask, &sample.relevant, cfg.kappa)
            - surrogate_score(&prev.mask, &sample.relevant, cfg.kappa);
    }
    let n = b as f64;
    Ok(cfg.alpha * task / n + cfg.beta * eff / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state_with(n: usize, index_map: Vec<usize>) -> PruningState {
        let codes = Matrix::from_rows(
            &index_map
                .iter()
                .map(|&i| vec![i as f64, 1.0])
                .collect::<Vec<_>>(),
        );
        PruningState {
            codes,
            mask: Mask::from_indices(n, &index_map),
            index_map,
            step: 0,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let g = SampleGenerator::new(GeneratorConfig::default()).unwrap();
        assert_eq!(g.generate(42), g.generate(42));
        assert_ne!(g.generate(42).tokens, g.generate(43).tokens);
        let s = g.generate(7);
        assert_eq!(s.relevant.len(), 16);
        assert!(s.relevant.windows(2).all(|w| w[0] < w[1]));
        assert!(s.relevant.iter().all(|&i| i < 64));
    }

    #[test]
    fn free_function_matches_generator() {
        let a = generate_sample(5, 32, 16, 8, 4, 2.0).unwrap();
        let b = generate_sample(5, 32, 16, 8, 4, 2.0).unwrap();
        assert_eq!(a, b);
        assert!(generate_sample(5, 4, 16, 8, 5, 2.0).is_err());
    }

    #[test]
    fn invalid_generator_configs_rejected() {
        let bad = GeneratorConfig {
            n_relevant: 0,
            ..Default::default()
        };
        assert!(SampleGenerator::new(bad).is_err());
        let bad = GeneratorConfig {
            signal_rank: 17,
            ..Default::default()
        };
        assert!(SampleGenerator::new(bad).is_err());
    }

    #[test]
    fn planted_tokens_align_with_query_direction() {
        let g = SampleGenerator::new(GeneratorConfig {
            signal_strength: 5.0,
            ..Default::default()
        })
        .unwrap();
        let mut wins = 0;
        for seed in 0..100 {
            let s = g.generate(seed);
            let u = g.direction(&s.query);
            let cos = |r: usize| {
                let row = s.tokens.row(r);
                let dot: f64 = row.iter().zip(&u).map(|(a, b)| a * b).sum();
                dot / row.iter().map(|v| v * v).sum::<f64>().sqrt()
            };
            let rel: f64 = s.relevant.iter().map(|&i| cos(i)).sum::<f64>() / s.relevant.len() as f64;
            let others: Vec<usize> = (0..64).filter(|i| !s.relevant.contains(i)).collect();
            let irr: f64 = others.iter().map(|&i| cos(i)).sum::<f64>() / others.len() as f64;
            if rel > irr {
                wins += 1;
            }
        }
        assert!(wins >= 95, "{wins}/100");
    }

    #[test]
    fn zero_signal_makes_relevant_tokens_indistinguishable() {
        let g = SampleGenerator::new(GeneratorConfig {
            signal_strength: 0.0,
            ..Default::default()
        })
        .unwrap();
        // Relevant rows carry no planted component: their mean projection on
        // u(q) is indistinguishable from noise.
        let mut total = 0.0;
        let mut count = 0;
        for seed in 0..200 {
            let s = g.generate(seed);
            let u = g.direction(&s.query);
            for &i in &s.relevant {
                total += s.tokens.row(i).iter().zip(&u).map(|(a, b)| a * b).sum::<f64>();
                count += 1;
            }
        }
        let mean = total / count as f64;
        assert!(mean.abs() < 4.0 / (count as f64).sqrt(), "mean projection {mean}");
    }

    #[test]
    fn score_examples() {
        assert_eq!(surrogate_score(&Mask::full(8), &[1, 2], 0.0), 1.0);
        assert_eq!(surrogate_score(&Mask::from_indices(8, &[1, 2]), &[1, 2], 3.0), 1.0);
        let s = surrogate_score(&Mask::from_indices(4, &[0, 1, 2]), &[0, 1], 0.25);
        assert!((s - 1.0 / (1.0 + 1.0 / 12.0)).abs() < 1e-15);
        assert!((s - 0.923077).abs() < 1e-6);
        assert_eq!(surrogate_score(&Mask::empty(4), &[0, 1], 0.25), 0.0);
    }

    #[test]
    fn apply_action_examples() {
        let s = state_with(8, vec![1, 4, 7]);
        let next = s.apply_action(&[true, false, true]).unwrap();
        assert_eq!(next.index_map, vec![1, 7]);
        assert!(!next.mask.get(4));
        assert_eq!(next.mask.indices(), vec![1, 7]);
        assert_eq!(next.codes.row(1), &[7.0, 1.0]);
        assert_eq!(next.step, 1);

        let same = s.apply_action(&[true, true, true]).unwrap();
        assert_eq!(same.index_map, s.index_map);
        assert_eq!(same.mask, s.mask);
        assert_eq!(same.step, 1);

        let none = s.apply_action(&[false, false, false]).unwrap();
        assert_eq!(none.k(), 0);
        assert_eq!(none.mask.count(), 0);

        assert!(s.apply_action(&[true]).is_err());
    }

    #[test]
    fn reward_examples() {
        let cfg = RewardConfig::default();
        let g = SampleGenerator::new(GeneratorConfig::default()).unwrap();
        let sample = g.generate(1);
        let s0 = PruningState::initial(Matrix::zeros(64, 2));
        let s1 = s0.apply_action(&[true; 64]).unwrap();
        assert_eq!(reward_step(&[&s0], &[&s1], &[&sample], &cfg).unwrap(), 0.0);

        let empty = PruningState {
            codes: Matrix::zeros(0, 2),
            mask: Mask::empty(64),
            index_map: vec![],
            step: 2,
        };
        assert!(matches!(
            reward_step(&[&empty], &[&empty], &[&sample], &cfg),
            Err(Error::DegenerateState(_))
        ));
    }

    #[test]
    fn efficiency_term_matches_full_scale_arithmetic() {
        let cfg = RewardConfig::default();
        let r = cfg.beta * efficiency_gain(576, 192).unwrap();
        assert!((r - 0.1 * (1.0 - 192.0 / 576.0)).abs() <= 1e-12);
        assert!((r - 0.066667).abs() < 1e-6);
    }

    #[test]
    fn batch_reward_is_mean_of_sample_rewards() {
        let cfg = RewardConfig::default();
        let g = SampleGenerator::new(GeneratorConfig::default()).unwrap();
        let a = g.generate(10);
        let b = g.generate(11);
        let s0a = PruningState::initial(Matrix::zeros(64, 1));
        let s0b = s0a.clone();
        let drop_a: Vec<bool> = (0..64).map(|i| i % 3 != 0).collect();
        let drop_b: Vec<bool> = (0..64).map(|i| i < 20).collect();
        let s1a = s0a.apply_action(&drop_a).unwrap();
        let s1b = s0b.apply_action(&drop_b).unwrap();
        let ra = sample_reward(&s0a, &s1a, &a, &cfg).unwrap();
        let rb = sample_reward(&s0b, &s1b, &b, &cfg).unwrap();
        let batch = reward_step(&[&s0a, &s0b], &[&s1a, &s1b], &[&a, &b], &cfg).unwrap();
        assert!((batch - (ra + rb) / 2.0).abs() <= 1e-12);
        let single = reward_step(&[&s0a], &[&s1a], &[&a], &cfg).unwrap();
        assert!((single - ra).abs() <= 1e-15);
    }
}
