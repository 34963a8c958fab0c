//! Flat `key = value` run configuration covering every tunable of the
//! pipeline.

use std::fmt::Write as _;
use std::path::Path;

use crate::agent::AgentConfig;
use crate::autoencoder::{AeTrainConfig, AutoencoderDims};
use crate::demos::{BceNormalization, HeuristicConfig, PretrainConfig};
use crate::env::{GeneratorConfig, RewardConfig, RewardMode};
use crate::error::{Error, Result};
use crate::eval::FlopsModel;
use crate::ppo::{GaeConfig, PpoConfig, RlConfig};
use crate::rollout::RolloutConfig;

/// Conversion between a config value and its text form.
trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn format_value(&self) -> String;
}

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|_| format!("`{s}` is not a number"))
    }
    fn format_value(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for usize {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|_| format!("`{s}` is not a non-negative integer"))
    }
    fn format_value(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|_| format!("`{s}` is not a non-negative integer"))
    }
    fn format_value(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for bool {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(format!("`{s}` is not `true` or `false`")),
        }
    }
    fn format_value(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for Vec<f64> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',').map(|v| f64::parse_value(v.trim())).collect()
    }
    fn format_value(&self) -> String {
        self.iter().map(f64::format_value).collect::<Vec<_>>().join(", ")
    }
}

impl ConfigValue for RewardMode {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "per_sample" => Ok(RewardMode::PerSample),
            "batch_mean" => Ok(RewardMode::BatchMean),
            _ => Err(format!("`{s}` is not `per_sample` or `batch_mean`")),
        }
    }
    fn format_value(&self) -> String {
        match self {
            RewardMode::PerSample => "per_sample",
            RewardMode::BatchMean => "batch_mean",
        }
        .into()
    }
}

impl ConfigValue for BceNormalization {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "per_trajectory" => Ok(BceNormalization::PerTrajectory),
            "per_token" => Ok(BceNormalization::PerToken),
            _ => Err(format!("`{s}` is not `per_trajectory` or `per_token`")),
        }
    }
    fn format_value(&self) -> String {
        match self {
            BceNormalization::PerTrajectory => "per_trajectory",
            BceNormalization::PerToken => "per_token",
        }
        .into()
    }
}

macro_rules! run_config {
    ($( $(#[$doc:meta])* $field:ident : $ty:ty = $default:expr ),* $(,)?) => {
        /// Every tunable of the pipeline under a flat key set.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $( $(#[$doc])* pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl RunConfig {
            /// All recognised keys, in echo order.
            pub const KEYS: &'static [&'static str] = &[$( stringify!($field) ),*];

            fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                match key {
                    $( stringify!($field) => {
                        self.$field = <$ty as ConfigValue>::parse_value(value)?;
                        Ok(())
                    } )*
                    _ => Err(format!("unknown key `{key}`")),
                }
            }

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$( (stringify!($field), self.$field.format_value()) ),*]
            }
        }
    };
}

run_config! {
    /// Master seed; every random stream of a run is derived from it.
    seed: u64 = 0,

    n_tokens: usize = 64,
    token_dim: usize = 64,
    query_dim: usize = 16,
    n_relevant: usize = 16,
    signal_strength: f64 = 5.0,
    signal_rank: usize = 4,
    projection_seed: u64 = 0x5eed_0001,
    ae_samples: usize = 500,
    demo_samples: usize = 2000,
    eval_samples: usize = 200,

    hidden_dim: usize = 32,
    latent_dim: usize = 8,
    ae_epochs: usize = 50,
    ae_lr: f64 = 1e-3,
    ae_batch: usize = 1,

    demo_rates: Vec<f64> = vec![0.25, 0.5],
    lfd_epochs: usize = 20,
    lfd_lr: f64 = 1e-3,
    lfd_batch: usize = 16,
    bce_normalization: BceNormalization = BceNormalization::PerTrajectory,

    model_dim: usize = 64,
    heads: usize = 4,
    ff_dim: usize = 128,
    use_attention: bool = true,

    alpha: f64 = 1.0,
    beta: f64 = 0.1,
    kappa: f64 = 0.25,
    reward_batch: usize = 8,
    reward_mode: RewardMode = RewardMode::PerSample,
    t_max: usize = 3,
    lambda_disc: f64 = 0.5,

    gamma: f64 = 0.99,
    gae_lambda: f64 = 0.95,
    clip_eps: f64 = 0.2,
    value_coef: f64 = 0.5,
    entropy_coef: f64 = 0.01,
    ppo_epochs: usize = 4,
    ppo_minibatch: usize = 64,
    ppo_lr: f64 = 3e-4,
    normalize_advantages: bool = true,
    ppo_iterations: usize = 200,
    rollout_samples: usize = 32,

    tau: f64 = 0.55,
    eval_rate: f64 = 1.0 / 3.0,

    flops_params: f64 = 7e9,
    text_tokens: f64 = 64.0,
    vision_cost: f64 = 0.0,
    pruner_cost: f64 = 0.0,
    decode_cost: f64 = 0.0,
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Absent keys keep
    /// their defaults and the result is validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: i + 1,
                    reason: format!("expected `key = value`, found `{line}`"),
                });
            };
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Parse {
                    line: i + 1,
                    reason: format!("duplicate key `{key}`"),
                });
            }
            cfg.set(key, value.trim()).map_err(|reason| Error::Parse { line: i + 1, reason })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Text form listing every key; parsing it yields an identical config.
    pub fn echo(&self) -> String {
        let mut out = String::from("# effective configuration\n");
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.generator().validate()?;
        if self.ae_samples < 2 {
            return Err(Error::config("ae_samples", "must be >= 2"));
        }
        if self.demo_samples == 0 {
            return Err(Error::config("demo_samples", "must be >= 1"));
        }
        if self.eval_samples == 0 {
            return Err(Error::config("eval_samples", "must be >= 1"));
        }
        if self.hidden_dim == 0 || self.latent_dim == 0 {
            return Err(Error::config("latent_dim", "autoencoder widths must be positive"));
        }
        for (key, lr) in [("ae_lr", self.ae_lr), ("lfd_lr", self.lfd_lr)] {
            if !(lr >= 0.0) || !lr.is_finite() {
                return Err(Error::config(key, "must be a finite value >= 0"));
            }
        }
        self.heuristic().validate()?;
        self.agent().validate()?;
        self.rl().validate()?;
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config("tau", "must lie in [0, 1]"));
        }
        if !(self.eval_rate > 0.0 && self.eval_rate <= 1.0) {
            return Err(Error::config("eval_rate", "must lie in (0, 1]"));
        }
        self.flops().validate()
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            n_tokens: self.n_tokens,
            token_dim: self.token_dim,
            query_dim: self.query_dim,
            n_relevant: self.n_relevant,
            signal_strength: self.signal_strength,
            signal_rank: self.signal_rank,
            projection_seed: self.projection_seed,
        }
    }

    pub fn ae_dims(&self) -> AutoencoderDims {
        AutoencoderDims {
            input_dim: self.token_dim,
            hidden_dim: self.hidden_dim,
            latent_dim: self.latent_dim,
        }
    }

    pub fn ae_train(&self, seed: u64) -> AeTrainConfig {
        AeTrainConfig {
            epochs: self.ae_epochs,
            lr: self.ae_lr,
            batch_samples: self.ae_batch,
            seed,
        }
    }

    pub fn heuristic(&self) -> HeuristicConfig {
        HeuristicConfig {
            rates: self.demo_rates.clone(),
        }
    }

    pub fn pretrain(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            epochs: self.lfd_epochs,
            lr: self.lfd_lr,
            batch_trajectories: self.lfd_batch,
            normalization: self.bce_normalization,
            seed,
        }
    }

    pub fn agent(&self) -> AgentConfig {
        AgentConfig {
            code_dim: self.latent_dim,
            query_dim: self.query_dim,
            model_dim: self.model_dim,
            heads: self.heads,
            ff_dim: self.ff_dim,
            use_attention: self.use_attention,
        }
    }

    pub fn reward(&self) -> RewardConfig {
        RewardConfig {
            alpha: self.alpha,
            beta: self.beta,
            kappa: self.kappa,
            batch_size: self.reward_batch,
            mode: self.reward_mode,
        }
    }

    pub fn rollout(&self) -> RolloutConfig {
        RolloutConfig {
            t_max: self.t_max,
            lambda_disc: self.lambda_disc,
            reward: self.reward(),
        }
    }

    pub fn rl(&self) -> RlConfig {
        RlConfig {
            iterations: self.ppo_iterations,
            samples_per_iteration: self.rollout_samples,
            rollout: self.rollout(),
            gae: GaeConfig {
                gamma: self.gamma,
                lambda: self.gae_lambda,
            },
            ppo: PpoConfig {
                clip_eps: self.clip_eps,
                value_coef: self.value_coef,
                entropy_coef: self.entropy_coef,
                epochs: self.ppo_epochs,
                minibatch: self.ppo_minibatch,
                lr: self.ppo_lr,
                normalize_advantages: self.normalize_advantages,
            },
            seed: 0,
            sample_seed_base: 0,
        }
    }

    pub fn flops(&self) -> FlopsModel {
        FlopsModel {
            params: self.flops_params,
            visual_tokens: self.n_tokens as f64,
            text_tokens: self.text_tokens,
            vision_cost: self.vision_cost,
            pruner_cost: self.pruner_cost,
            decode_cost: self.decode_cost,
        }
    }
}
