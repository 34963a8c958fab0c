//! Pruning agent.
//!
//! Compressed token codes and the query are projected to a common width,
//! stacked with the query row last, and passed through one multi-head
//! self-attention block. The policy head maps each token row to a retention
//! probability; the value head mean-pools the token rows (query row excluded)
//! into a scalar state value. Both heads read the same feature matrix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, AttentionCache, Linear, Module, MultiHeadAttention, ResidualMlp, ResidualMlpCache};
use crate::tensor::{sigmoid_scalar, Matrix, Parameter};

/// Lower/upper bound applied to every probability before a log.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub code_dim: usize,
    pub query_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// `false` bypasses the attention block (MLP-only ablation).
    pub use_attention: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            code_dim: 8,
            query_dim: 16,
            model_dim: 64,
            heads: 4,
            ff_dim: 128,
            use_attention: true,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.code_dim == 0 || self.query_dim == 0 || self.model_dim == 0 || self.ff_dim == 0 {
            return Err(Error::config("model_dim", "agent dimensions must be positive"));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::config(
                "heads",
                format!("model_dim {} is not divisible by {} heads", self.model_dim, self.heads),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    config: AgentConfig,
    pub token_proj: Linear,
    pub query_proj: Linear,
    pub attention: MultiHeadAttention,
    pub policy_block: ResidualMlp,
    pub policy_out: Linear,
    pub value_block: ResidualMlp,
    pub value_out: Linear,
}

/// Everything the backward pass needs from one state's forward pass.
#[derive(Clone, Debug)]
pub struct AgentTape {
    codes: Matrix,
    query: Matrix,
    attention: Option<AttentionCache>,
    features: Matrix,
    policy: ResidualMlpCache,
    policy_hidden: Matrix,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    value_cache: ResidualMlpCache,
    value_hidden: Matrix,
    pub value: f64,
}

impl AgentTape {
    /// Full feature matrix `(K+1) x d`, query row last.
    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }
}

impl Agent {
    pub fn new(config: AgentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim;
        Ok(Self {
            config,
            token_proj: Linear::new(config.code_dim, d, &mut rng),
            query_proj: Linear::new(config.query_dim, d, &mut rng),
            attention: MultiHeadAttention::new(d, config.heads, &mut rng)?,
            policy_block: ResidualMlp::new(d, config.ff_dim, &mut rng),
            policy_out: Linear::new(d, 1, &mut rng),
            value_block: ResidualMlp::new(d, config.ff_dim, &mut rng),
            value_out: Linear::new(d, 1, &mut rng),
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    fn check_inputs(&self, codes: &Matrix, query: &[f64]) -> Result<()> {
        if codes.rows() == 0 {
            return Err(Error::DegenerateState("agent called on a state with no tokens".into()));
        }
        if codes.cols() != self.config.code_dim {
            return Err(Error::dim(
                "extract_features",
                format!("codes have {} features, agent expects {}", codes.cols(), self.config.code_dim),
            ));
        }
        if query.len() != self.config.query_dim {
            return Err(Error::dim(
                "extract_features",
                format!("query has {} features, agent expects {}", query.len(), self.config.query_dim),
            ));
        }
        Ok(())
    }

    fn embed(&self, codes: &Matrix, query: &Matrix) -> Matrix {
        self.token_proj
            .forward(codes)
            .vstack(&self.query_proj.forward(query))
            .expect("projections share the model width")
    }

    /// `(K+1) x d` features, token rows in input order then the query row.
    pub fn extract_features(&self, codes: &Matrix, query: &[f64]) -> Result<Matrix> {
        self.check_inputs(codes, query)?;
        let x = self.embed(codes, &Matrix::row_vector(query));
        if self.config.use_attention {
            Ok(self.attention.forward(&x)?.0)
        } else {
            Ok(x)
        }
    }

    /// Retention probability of each token row; the query row is ignored.
    pub fn policy_probs(&self, features: &Matrix) -> Vec<f64> {
        let k = features.rows().saturating_sub(1);
        let (g, _) = self.policy_block.forward(&features.top_rows(k));
        self.policy_out
            .forward(&g)
            .data()
            .iter()
            .map(|&l| sigmoid_scalar(l))
            .collect()
    }

    /// Mean of the token rows (query row excluded) through the value head.
    pub fn value_estimate(&self, features: &Matrix) -> Result<f64> {
        let k = features.rows().saturating_sub(1);
        if k == 0 {
            return Err(Error::DegenerateState("value of a state with no tokens".into()));
        }
        let pooled = features.top_rows(k).mean_rows();
        let (h, _) = self.value_block.forward(&pooled);
        Ok(self.value_out.forward(&h).get(0, 0))
    }

    pub fn forward(&self, codes: &Matrix, query: &[f64]) -> Result<AgentTape> {
        self.check_inputs(codes, query)?;
        let query = Matrix::row_vector(query);
        let input = self.embed(codes, &query);
        let (features, attention) = if self.config.use_attention {
            let (f, cache) = self.attention.forward(&input)?;
            (f, Some(cache))
        } else {
            (input, None)
        };
        let k = codes.rows();
        let token_features = features.top_rows(k);
        let (policy_hidden, policy) = self.policy_block.forward(&token_features);
        let logits = self.policy_out.forward(&policy_hidden).into_vec();
        let probs = logits.iter().map(|&l| sigmoid_scalar(l)).collect();
        let pooled = token_features.mean_rows();
        let (value_hidden, value_cache) = self.value_block.forward(&pooled);
        let value = self.value_out.forward(&value_hidden).get(0, 0);
        Ok(AgentTape {
            codes: codes.clone(),
            query,
            attention,
            features,
            policy,
            policy_hidden,
            logits,
            probs,
            value_cache,
            value_hidden,
            value,
        })
    }

    /// Accumulates parameter gradients given the loss gradient with respect to
    /// each token's policy logit and to the state value.
    pub fn backward(&mut self, tape: &AgentTape, dlogits: &[f64], dvalue: f64) {
        let k = tape.k();
        debug_assert_eq!(dlogits.len(), k);
        let d = self.config.model_dim;
        let mut dfeatures = Matrix::zeros(k + 1, d);

        let dl = Matrix::from_vec(k, 1, dlogits.to_vec()).expect("shape");
        let dg = self.policy_out.backward(&tape.policy_hidden, &dl);
        let dtok = self.policy_block.backward(&tape.policy, &dg);
        for r in 0..k {
            dfeatures.row_mut(r).copy_from_slice(dtok.row(r));
        }

        if dvalue != 0.0 {
            let dv = Matrix::from_vec(1, 1, vec![dvalue]).expect("shape");
            let dh = self.value_out.backward(&tape.value_hidden, &dv);
            let dpooled = self.value_block.backward(&tape.value_cache, &dh);
            let inv_k = 1.0 / k as f64;
            for r in 0..k {
                for (o, g) in dfeatures.row_mut(r).iter_mut().zip(dpooled.row(0)) {
                    *o += g * inv_k;
                }
            }
        }

        let dinput = match &tape.attention {
            Some(cache) => self.attention.backward(cache, &dfeatures),
            None => dfeatures,
        };
        let dcodes = dinput.top_rows(k);
        let dquery = dinput.select_rows(&[k]);
        self.token_proj.backward(&tape.codes, &dcodes);
        self.query_proj.backward(&tape.query, &dquery);
    }

    /// Joint log-probability of `bits` under the current parameters at step `t`.
    pub fn action_log_prob(&self, codes: &Matrix, query: &[f64], bits: &[bool], step: usize, lambda_disc: f64) -> Result<f64> {
        if bits.len() != codes.rows() {
            return Err(Error::dim(
                "action_log_prob",
                format!("{} action bits for {} tokens", bits.len(), codes.rows()),
            ));
        }
        let tape = self.forward(codes, query)?;
        Ok(joint_log_prob(&tape.probs, bits, step, lambda_disc))
    }
}

impl Module for Agent {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter)>) {
        self.token_proj.visit_params(&join(prefix, "token_proj"), out);
        self.query_proj.visit_params(&join(prefix, "query_proj"), out);
        self.attention.visit_params(&join(prefix, "attention"), out);
        self.policy_block.visit_params(&join(prefix, "policy_block"), out);
        self.policy_out.visit_params(&join(prefix, "policy_out"), out);
        self.value_block.visit_params(&join(prefix, "value_block"), out);
        self.value_out.visit_params(&join(prefix, "value_out"), out);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Parameter)>) {
        self.token_proj.visit_params_mut(&join(prefix, "token_proj"), out);
        self.query_proj.visit_params_mut(&join(prefix, "query_proj"), out);
        self.attention.visit_params_mut(&join(prefix, "attention"), out);
        self.policy_block.visit_params_mut(&join(prefix, "policy_block"), out);
        self.policy_out.visit_params_mut(&join(prefix, "policy_out"), out);
        self.value_block.visit_params_mut(&join(prefix, "value_block"), out);
        self.value_out.visit_params_mut(&join(prefix, "value_out"), out);
    }
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `lambda_disc^t`.
#[inline]
pub fn step_discount(step: usize, lambda_disc: f64) -> f64 {
    lambda_disc.powi(step as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionSample {
    pub bits: Vec<bool>,
    pub joint_log_prob: f64,
    /// Discounted retention probabilities `lambda_disc^t * p_i`.
    pub probs: Vec<f64>,
}

/// Draws `a_i ~ Bernoulli(lambda_disc^t p_i)` using one uniform per token:
/// token `i` is retained iff `uniforms[i] < lambda_disc^t p_i`.
pub fn sample_actions(probs: &[f64], step: usize, lambda_disc: f64, uniforms: &[f64]) -> ActionSample {
    debug_assert_eq!(probs.len(), uniforms.len());
    let c = step_discount(step, lambda_disc);
    let discounted: Vec<f64> = probs.iter().map(|p| c * p).collect();
    let bits: Vec<bool> = discounted.iter().zip(uniforms).map(|(q, u)| u < q).collect();
    let joint_log_prob = joint_log_prob(probs, &bits, step, lambda_disc);
    ActionSample {
        bits,
        joint_log_prob,
        probs: discounted,
    }
}

/// `sum_i [a_i log q_i + (1 - a_i) log(1 - q_i)]` with `q_i = lambda_disc^t p_i`.
pub fn joint_log_prob(probs: &[f64], bits: &[bool], step: usize, lambda_disc: f64) -> f64 {
    let c = step_discount(step, lambda_disc);
    probs
        .iter()
        .zip(bits)
        .map(|(&p, &a)| {
            let q = clamp_prob(c * p);
            if a {
                q.ln()
            } else {
                (1.0 - q).ln()
            }
        })
        .sum()
}

/// Gradient of [`joint_log_prob`] with respect to each pre-sigmoid logit.
pub fn joint_log_prob_grad(probs: &[f64], bits: &[bool], step: usize, lambda_disc: f64) -> Vec<f64> {
    let c = step_discount(step, lambda_disc);
    probs
        .iter()
        .zip(bits)
        .map(|(&p, &a)| {
            let q = c * p;
            if q < PROB_CLAMP || q > 1.0 - PROB_CLAMP {
                return 0.0;
            }
            if a {
                1.0 - p
            } else {
                -c * p * (1.0 - p) / (1.0 - q)
            }
        })
        .collect()
}

/// Factorized Bernoulli entropy of already-discounted probabilities.
pub fn entropy(discounted: &[f64]) -> f64 {
    discounted
        .iter()
        .map(|&q| {
            let q = clamp_prob(q);
            -(q * q.ln() + (1.0 - q) * (1.0 - q).ln())
        })
        .sum()
}

/// Gradient of `entropy(lambda_disc^t p)` with respect to each logit.
pub fn entropy_grad(probs: &[f64], step: usize, lambda_disc: f64) -> Vec<f64> {
    let c = step_discount(step, lambda_disc);
    probs
        .iter()
        .map(|&p| {
            let q = c * p;
            if q < PROB_CLAMP || q > 1.0 - PROB_CLAMP {
                return 0.0;
            }
            ((1.0 - q) / q).ln() * c * p * (1.0 - p)
        })
        .collect()
}

/// One-shot inference mask: retain iff `p_i > tau`. No step discount.
pub fn deterministic_mask(probs: &[f64], tau: f64) -> Vec<bool> {
    probs.iter().map(|&p| p > tau).collect()
}

/// Independent uniform draws keyed by `(episode seed, original token index,
/// step)`, so a token's draw does not depend on where it sits in the state.
pub fn token_uniform(seed: u64, index: usize, step: usize) -> f64 {
    use rand::Rng;
    let key = seed
        ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (step as u64 + 1).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    ChaCha8Rng::seed_from_u64(key).gen::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> AgentConfig {
        AgentConfig {
            code_dim: 4,
            query_dim: 3,
            model_dim: 8,
            heads: 2,
            ff_dim: 12,
            use_attention: true,
        }
    }

    fn codes(k: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::uniform_init(k, 4, 1, &mut rng).scale(2.0)
    }

    const QUERY: [f64; 3] = [0.3, -1.2, 0.8];

    #[test]
    fn feature_shapes_and_degenerate_state() {
        let agent = Agent::new(small_config(), 0).unwrap();
        let f = agent.extract_features(&codes(1, 1), &QUERY).unwrap();
        assert_eq!(f.shape(), (2, 8));
        assert!(matches!(
            agent.extract_features(&Matrix::zeros(0, 4), &QUERY),
            Err(Error::DegenerateState(_))
        ));
        assert!(matches!(agent.forward(&codes(2, 1), &[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn features_are_permutation_equivariant() {
        let agent = Agent::new(small_config(), 2).unwrap();
        let z = codes(5, 3);
        let perm = [4, 2, 0, 1, 3];
        let f = agent.extract_features(&z, &QUERY).unwrap();
        let fp = agent.extract_features(&z.select_rows(&perm), &QUERY).unwrap();
        let mut expect = perm.to_vec();
        expect.push(5);
        assert!(fp.max_abs_diff(&f.select_rows(&expect)) < 1e-12);
        let v = agent.value_estimate(&f).unwrap();
        let vp = agent.value_estimate(&fp).unwrap();
        assert!((v - vp).abs() < 1e-12);
    }

    #[test]
    fn single_head_forward_matches_hand_evaluation() {
        let cfg = AgentConfig {
            code_dim: 2,
            query_dim: 2,
            model_dim: 4,
            heads: 1,
            ff_dim: 4,
            use_attention: true,
        };
        let agent = Agent::new(cfg, 9).unwrap();
        let z = Matrix::from_rows(&[[0.5, -1.0], [2.0, 0.25]]);
        let q = [1.0, -0.5];
        let f = agent.extract_features(&z, &q).unwrap();

        // X = [Z W_z + b_z; q W_q + b_q]
        let mut x = vec![vec![0.0; 4]; 3];
        let proj = |lin: &Linear, v: &[f64], out: &mut Vec<f64>| {
            for j in 0..4 {
                let mut s = lin.bias.value.get(0, j);
                for (i, vi) in v.iter().enumerate() {
                    s += vi * lin.weight.value.get(i, j);
                }
                out[j] = s;
            }
        };
        proj(&agent.token_proj, z.row(0), &mut x[0]);
        proj(&agent.token_proj, z.row(1), &mut x[1]);
        proj(&agent.query_proj, &q, &mut x[2]);
        let mul = |a: &Vec<f64>, w: &Matrix| -> Vec<f64> {
            (0..4).map(|j| (0..4).map(|i| a[i] * w.get(i, j)).sum()).collect()
        };
        let a = &agent.attention;
        let qs: Vec<Vec<f64>> = x.iter().map(|r| mul(r, &a.w_q.value)).collect();
        let ks: Vec<Vec<f64>> = x.iter().map(|r| mul(r, &a.w_k.value)).collect();
        let vs: Vec<Vec<f64>> = x.iter().map(|r| mul(r, &a.w_v.value)).collect();
        for r in 0..3 {
            let scores: Vec<f64> = (0..3)
                .map(|c| qs[r].iter().zip(&ks[c]).map(|(u, v)| u * v).sum::<f64>() / 2.0)
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let total: f64 = e.iter().sum();
            let head: Vec<f64> = (0..4)
                .map(|j| (0..3).map(|c| e[c] / total * vs[c][j]).sum())
                .collect();
            let out = mul(&head, &a.w_o.value);
            let res: Vec<f64> = (0..4).map(|j| x[r][j] + out[j]).collect();
            let mean = res.iter().sum::<f64>() / 4.0;
            let var = res.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            for j in 0..4 {
                let expect = (res[j] - mean) / (var + 1e-5).sqrt();
                assert!((f.get(r, j) - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_policy_head_gives_half() {
        let mut agent = Agent::new(small_config(), 4).unwrap();
        agent.policy_out = Linear::zeros(8, 1);
        let tape = agent.forward(&codes(6, 5), &QUERY).unwrap();
        assert!(tape.probs.iter().all(|&p| p == 0.5));
        agent.policy_out.bias.value.set(0, 0, 40.0);
        let tape = agent.forward(&codes(6, 5), &QUERY).unwrap();
        assert!(tape.probs.iter().all(|&p| p > 1.0 - 1e-12));
    }

    #[test]
    fn identical_tokens_get_identical_probs() {
        let agent = Agent::new(small_config(), 6).unwrap();
        let z = codes(3, 7).select_rows(&[0, 1, 0]);
        let tape = agent.forward(&z, &QUERY).unwrap();
        assert_eq!(tape.probs[0], tape.probs[2]);
    }

    #[test]
    fn value_examples() {
        let mut agent = Agent::new(small_config(), 8).unwrap();
        let z = codes(4, 9);
        let f = agent.extract_features(&z, &QUERY).unwrap();
        // duplicating every token row leaves the mean unchanged
        let mut dup_rows: Vec<usize> = (0..4).chain(0..4).collect();
        dup_rows.push(4);
        let fd = f.select_rows(&dup_rows);
        assert!((agent.value_estimate(&f).unwrap() - agent.value_estimate(&fd).unwrap()).abs() < 1e-12);

        agent.value_out = Linear::zeros(8, 1);
        agent.value_out.bias.value.set(0, 0, 1.75);
        assert_eq!(agent.value_estimate(&f).unwrap(), 1.75);
        assert!(agent.value_estimate(&f.select_rows(&[4])).is_err());
    }

    #[test]
    fn discounted_sampling() {
        let s = sample_actions(&[0.8], 2, 0.5, &[0.19]);
        assert!((s.probs[0] - 0.2).abs() < 1e-15);
        assert_eq!(s.bits, vec![true]);
        let s = sample_actions(&[0.8], 2, 0.5, &[0.21]);
        assert_eq!(s.bits, vec![false]);
        assert!((s.joint_log_prob - 0.8f64.ln()).abs() < 1e-12);
        let s = sample_actions(&[0.37, 0.9], 0, 0.5, &[0.5, 0.5]);
        assert_eq!(s.probs, vec![0.37, 0.9]);
    }

    #[test]
    fn joint_log_prob_closed_form() {
        let lp = joint_log_prob(&[0.5; 6], &[true; 6], 0, 0.5);
        assert!((lp + 6.0 * 2f64.ln()).abs() < 1e-12);
        let lp = joint_log_prob(&[1.0; 6], &[true; 6], 1, 0.5);
        assert!((lp + 6.0 * 2f64.ln()).abs() < 1e-12);
        // clamping keeps contradicting bits finite
        assert!(joint_log_prob(&[1.0], &[false], 0, 0.5).is_finite());
        assert!(joint_log_prob(&[0.0], &[true], 0, 0.5).is_finite());
    }

    #[test]
    fn stored_log_prob_is_self_consistent() {
        let agent = Agent::new(small_config(), 10).unwrap();
        let z = codes(7, 11);
        let tape = agent.forward(&z, &QUERY).unwrap();
        let u: Vec<f64> = (0..7).map(|i| token_uniform(3, i, 1)).collect();
        let s = sample_actions(&tape.probs, 1, 0.5, &u);
        let again = agent.action_log_prob(&z, &QUERY, &s.bits, 1, 0.5).unwrap();
        assert!((again - s.joint_log_prob).abs() <= 1e-12);
        assert!(agent.action_log_prob(&z, &QUERY, &s.bits[..3], 1, 0.5).is_err());
    }

    #[test]
    fn exhaustive_action_probabilities_sum_to_one() {
        let agent = Agent::new(small_config(), 12).unwrap();
        for k in 1..=8 {
            let tape = agent.forward(&codes(k, 13 + k as u64), &QUERY).unwrap();
            for step in 0..3 {
                let mut total = 0.0;
                for m in 0u32..(1 << k) {
                    let bits: Vec<bool> = (0..k).map(|i| m >> i & 1 == 1).collect();
                    let p = joint_log_prob(&tape.probs, &bits, step, 0.5).exp();
                    assert!(p > 0.0 && p <= 1.0);
                    total += p;
                }
                assert!((total - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&[0.5]) - 2f64.ln()).abs() < 1e-15);
        assert!(entropy(&[1e-12]) < 1e-5);
        assert!(entropy(&[1.0]) < 1e-5);
        let qs = [0.1, 0.35, 0.5, 0.93];
        let sum: f64 = qs.iter().map(|&q| entropy(&[q])).sum();
        assert!((entropy(&qs) - sum).abs() <= 1e-12);
    }

    #[test]
    fn deterministic_mask_examples() {
        assert_eq!(deterministic_mask(&[0.01, 0.5, 0.99], 0.0), vec![true, true, true]);
        assert_eq!(deterministic_mask(&[0.55], 0.55), vec![false]);
        assert_eq!(deterministic_mask(&[0.56], 0.55), vec![true]);
        let probs = [0.1, 0.4, 0.55, 0.7, 0.9];
        let lo = deterministic_mask(&probs, 0.3);
        let hi = deterministic_mask(&probs, 0.6);
        assert!(hi.iter().zip(&lo).all(|(h, l)| !*h || *l));
    }

    fn fd_check(agent: &Agent, loss: impl Fn(&Agent) -> f64) -> f64 {
        let h = 1e-5;
        let n = agent.params().len();
        let mut worst: f64 = 0.0;
        for pi in 0..n {
            let len = agent.params()[pi].1.value.data().len();
            for e in 0..len {
                let mut plus = agent.clone();
                plus.params_mut()[pi].1.value.data_mut()[e] += h;
                let mut minus = agent.clone();
                minus.params_mut()[pi].1.value.data_mut()[e] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = agent.params()[pi].1.grad.data()[e];
                if fd.abs() > 1e-7 || an.abs() > 1e-7 {
                    worst = worst.max((fd - an).abs() / (fd.abs() + an.abs()));
                }
            }
        }
        worst
    }

    #[test]
    fn log_prob_and_value_gradients_match_finite_differences() {
        for (seed, use_attention) in [(0, true), (1, true), (2, true), (3, false), (4, true)] {
            let cfg = AgentConfig {
                use_attention,
                ..small_config()
            };
            let mut agent = Agent::new(cfg, seed).unwrap();
            let z = codes(5, 100 + seed);
            let bits = [true, false, true, true, false];
            let step = (seed % 3) as usize;
            let tape = agent.forward(&z, &QUERY).unwrap();
            let dl = joint_log_prob_grad(&tape.probs, &bits, step, 0.5);
            agent.zero_grad();
            agent.backward(&tape, &dl, 0.7);
            let worst = fd_check(&agent, |a| {
                let t = a.forward(&z, &QUERY).unwrap();
                joint_log_prob(&t.probs, &bits, step, 0.5) + 0.7 * t.value
            });
            assert!(worst <= 1e-4, "seed {seed}: rel err {worst}");
        }
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        let mut agent = Agent::new(small_config(), 21).unwrap();
        let z = codes(4, 22);
        let tape = agent.forward(&z, &QUERY).unwrap();
        let dl = entropy_grad(&tape.probs, 1, 0.5);
        agent.zero_grad();
        agent.backward(&tape, &dl, 0.0);
        let worst = fd_check(&agent, |a| {
            let t = a.forward(&z, &QUERY).unwrap();
            let c = step_discount(1, 0.5);
            entropy(&t.probs.iter().map(|p| c * p).collect::<Vec<_>>())
        });
        assert!(worst <= 1e-4, "rel err {worst}");
    }

    #[test]
    fn token_uniforms_are_keyed_and_in_range() {
        assert_eq!(token_uniform(1, 2, 3), token_uniform(1, 2, 3));
        assert_ne!(token_uniform(1, 2, 3), token_uniform(1, 3, 3));
        assert_ne!(token_uniform(1, 2, 3), token_uniform(1, 2, 4));
        for i in 0..100 {
            let u = token_uniform(9, i, 0);
            assert!((0.0..1.0).contains(&u));
        }
    }
}
