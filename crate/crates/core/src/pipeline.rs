//! Phase orchestration shared by the command-line front end and the
//! experiment drivers: seed derivation, the three training phases,
//! evaluation against baselines, and the ablation grids.

use serde::{Deserialize, Serialize};

use crate::agent::Agent;
use crate::autoencoder::{train_autoencoder, Autoencoder, ReconReport};
use crate::checkpoint::{find, Section};
use crate::config::RunConfig;
use crate::demos::{generate_demo, pretrain_policy, DemoTrajectory, HeuristicPruner, PretrainEpoch};
use crate::env::{Sample, SampleGenerator};
use crate::error::{Error, Result};
use crate::eval::{baseline_heuristic, baseline_random, evaluate, evaluate_at_rate, tau_sweep, EvalReport, DEFAULT_TAU_GRID};
use crate::ppo::{train_rl, MetricRow};

/// Maps a master seed and a stream label to an independent 64-bit seed.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = master ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Every random stream of a run, derived from the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PhaseSeeds {
    pub master: u64,
    pub pool_base: u64,
    pub eval_base: u64,
    pub rl_sample_base: u64,
    pub ae_init: u64,
    pub ae_train: u64,
    pub agent_init: u64,
    pub lfd: u64,
    pub rl: u64,
    pub baseline: u64,
    pub trace: u64,
}

impl PhaseSeeds {
    pub fn new(master: u64) -> Self {
        // Sample seed ranges are offset from these bases, so keep headroom.
        let base = |tag| derive_seed(master, tag) >> 8;
        Self {
            master,
            pool_base: base("pool"),
            eval_base: base("eval"),
            rl_sample_base: base("rl-samples"),
            ae_init: derive_seed(master, "ae-init"),
            ae_train: derive_seed(master, "ae-train"),
            agent_init: derive_seed(master, "agent-init"),
            lfd: derive_seed(master, "lfd"),
            rl: derive_seed(master, "rl"),
            baseline: derive_seed(master, "baseline"),
            trace: derive_seed(master, "trace"),
        }
    }
}

pub fn generator(cfg: &RunConfig) -> Result<SampleGenerator> {
    SampleGenerator::new(cfg.generator())
}

/// Training pool shared by autoencoder fitting and demonstration generation.
pub fn pool_samples(cfg: &RunConfig, seeds: &PhaseSeeds, gen: &SampleGenerator) -> Vec<Sample> {
    let n = cfg.ae_samples.max(cfg.demo_samples) as u64;
    gen.generate_many(seeds.pool_base..seeds.pool_base + n)
}

/// Held-out evaluation samples, disjoint from every training stream.
pub fn eval_samples(cfg: &RunConfig, seeds: &PhaseSeeds, gen: &SampleGenerator) -> Vec<Sample> {
    gen.generate_many(seeds.eval_base..seeds.eval_base + cfg.eval_samples as u64)
}

/// Trains on the first `ae_samples` pool samples and freezes the result.
pub fn fit_encoder(cfg: &RunConfig, seeds: &PhaseSeeds, pool: &[Sample]) -> Result<(Autoencoder, Vec<ReconReport>)> {
    if pool.len() < cfg.ae_samples {
        return Err(Error::Precondition(format!(
            "autoencoder needs {} samples, {} available",
            cfg.ae_samples,
            pool.len()
        )));
    }
    let tokens: Vec<_> = pool[..cfg.ae_samples].iter().map(|s| s.tokens.clone()).collect();
    let (ae, log) = train_autoencoder(Autoencoder::new(cfg.ae_dims(), seeds.ae_init), &tokens, &cfg.ae_train(seeds.ae_train))?;
    Ok((ae.frozen(), log))
}

pub fn build_demos(cfg: &RunConfig, encoder: &Autoencoder, gen: &SampleGenerator, pool: &[Sample]) -> Result<Vec<DemoTrajectory>> {
    let pruner = HeuristicPruner::new(encoder, gen)?;
    let heuristic = cfg.heuristic();
    pool.iter()
        .take(cfg.demo_samples)
        .map(|s| generate_demo(s, &pruner, &heuristic))
        .collect()
}

pub fn init_agent(cfg: &RunConfig, seeds: &PhaseSeeds) -> Result<Agent> {
    Agent::new(cfg.agent(), seeds.agent_init)
}

pub fn pretrain(cfg: &RunConfig, seeds: &PhaseSeeds, demos: &[DemoTrajectory]) -> Result<(Agent, Vec<PretrainEpoch>)> {
    pretrain_policy(init_agent(cfg, seeds)?, demos, &cfg.pretrain(seeds.lfd))
}

pub fn fine_tune(
    cfg: &RunConfig,
    seeds: &PhaseSeeds,
    agent: &mut Agent,
    encoder: &Autoencoder,
    gen: &SampleGenerator,
    on_row: impl FnMut(&MetricRow) -> Result<()>,
) -> Result<Vec<MetricRow>> {
    let mut rl = cfg.rl();
    rl.seed = seeds.rl;
    rl.sample_seed_base = seeds.rl_sample_base;
    train_rl(agent, encoder, gen, &rl, on_row)
}

/// Baseline keys in [`EvalReport::baselines`].
pub const POLICY_AT_RATE: &str = "policy_at_rate";
pub const RANDOM_AT_RATE: &str = "random_at_rate";
pub const HEURISTIC_AT_RATE: &str = "heuristic_at_rate";

/// One-shot evaluation at `tau`, the threshold sweep, and the policy and
/// both baselines at the matched retention rate `eval_rate`.
pub fn assess(
    cfg: &RunConfig,
    seeds: &PhaseSeeds,
    agent: &Agent,
    encoder: &Autoencoder,
    gen: &SampleGenerator,
    samples: &[Sample],
    tau: f64,
) -> Result<EvalReport> {
    let kappa = cfg.kappa;
    let mut report = evaluate(agent, encoder, samples, tau, kappa)?;
    report.per_tau = tau_sweep(agent, encoder, samples, &DEFAULT_TAU_GRID, kappa)?;
    let pruner = HeuristicPruner::new(encoder, gen)?;
    let rate = cfg.eval_rate;
    let at_rate = evaluate_at_rate(agent, encoder, samples, rate, kappa)?;
    report.baselines.insert(POLICY_AT_RATE.into(), at_rate.mean_score);
    report
        .baselines
        .insert(RANDOM_AT_RATE.into(), baseline_random(samples, rate, seeds.baseline, kappa)?.mean_score);
    report
        .baselines
        .insert(HEURISTIC_AT_RATE.into(), baseline_heuristic(samples, &pruner, rate, kappa)?.mean_score);
    Ok(report)
}

/// Products of a full generate, compress, imitate, fine-tune, evaluate run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub encoder: Autoencoder,
    pub agent: Agent,
    pub recon: Vec<ReconReport>,
    pub pretrain: Vec<PretrainEpoch>,
    pub metrics: Vec<MetricRow>,
    pub report: EvalReport,
    /// Matched-rate score of the policy before fine-tuning.
    pub initial_matched_score: f64,
}

impl RunOutcome {
    pub fn matched_score(&self) -> f64 {
        self.report.baselines[POLICY_AT_RATE]
    }
}

pub fn run_pipeline(cfg: &RunConfig, master: u64, from_scratch: bool) -> Result<RunOutcome> {
    let seeds = PhaseSeeds::new(master);
    let gen = generator(cfg)?;
    let pool = pool_samples(cfg, &seeds, &gen);
    let (encoder, recon) = fit_encoder(cfg, &seeds, &pool)?;
    let (mut agent, pretrain_log) = if from_scratch {
        (init_agent(cfg, &seeds)?, Vec::new())
    } else {
        pretrain(cfg, &seeds, &build_demos(cfg, &encoder, &gen, &pool)?)?
    };
    let eval = eval_samples(cfg, &seeds, &gen);
    let initial_matched_score = evaluate_at_rate(&agent, &encoder, &eval, cfg.eval_rate, cfg.kappa)?.mean_score;
    let metrics = fine_tune(cfg, &seeds, &mut agent, &encoder, &gen, |_| Ok(()))?;
    let report = assess(cfg, &seeds, &agent, &encoder, &gen, &eval, cfg.tau)?;
    Ok(RunOutcome {
        encoder,
        agent,
        recon,
        pretrain: pretrain_log,
        metrics,
        report,
        initial_matched_score,
    })
}

/// One cell of an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    /// Policy score at the matched retention rate.
    pub score: f64,
    /// `score` as a percentage of the full-mask score.
    pub relative_score: f64,
    pub random: f64,
    pub heuristic: f64,
    /// Score and tokens of one-shot thresholding at `tau`.
    pub tau_score: f64,
    pub tau_tokens: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Ablation {
    /// Rollout horizon grid.
    TMax(Vec<usize>),
    /// Code width grid.
    Dimension(Vec<usize>),
    /// Attention extractor against the token-wise MLP.
    Arch,
    /// Demonstration-initialized against randomly initialized fine-tuning.
    LfdVsScratch,
}

impl Ablation {
    pub fn name(&self) -> &'static str {
        match self {
            Ablation::TMax(_) => "tmax",
            Ablation::Dimension(_) => "dimension",
            Ablation::Arch => "arch",
            Ablation::LfdVsScratch => "lfd-vs-scratch",
        }
    }
}

fn row(label: String, report: &EvalReport) -> AblationRow {
    let score = report.baselines[POLICY_AT_RATE];
    AblationRow {
        label,
        score,
        relative_score: if report.full_score == 0.0 { 0.0 } else { 100.0 * score / report.full_score },
        random: report.baselines[RANDOM_AT_RATE],
        heuristic: report.baselines[HEURISTIC_AT_RATE],
        tau_score: report.mean_score,
        tau_tokens: report.mean_retained,
    }
}

/// Runs every cell of `ablation` under one master seed. Stages a cell does
/// not vary are computed once and shared, which yields the same numbers as
/// independent runs because every stage is deterministic in its inputs.
pub fn run_ablation(
    cfg: &RunConfig,
    master: u64,
    ablation: &Ablation,
    mut on_cell: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let seeds = PhaseSeeds::new(master);
    let gen = generator(cfg)?;
    let pool = pool_samples(cfg, &seeds, &gen);
    let eval = eval_samples(cfg, &seeds, &gen);
    let mut rows = Vec::new();
    let mut finish = |label: String, cell: &RunConfig, mut agent: Agent, encoder: &Autoencoder| -> Result<()> {
        fine_tune(cell, &seeds, &mut agent, encoder, &gen, |_| Ok(()))?;
        let r = row(label, &assess(cell, &seeds, &agent, encoder, &gen, &eval, cell.tau)?);
        on_cell(&r);
        rows.push(r);
        Ok(())
    };
    match ablation {
        Ablation::TMax(grid) => {
            let (encoder, _) = fit_encoder(cfg, &seeds, &pool)?;
            let (agent, _) = pretrain(cfg, &seeds, &build_demos(cfg, &encoder, &gen, &pool)?)?;
            for &t in grid {
                let cell = RunConfig { t_max: t, ..cfg.clone() };
                cell.validate()?;
                finish(format!("t_max={t}"), &cell, agent.clone(), &encoder)?;
            }
        }
        Ablation::Dimension(grid) => {
            for &d in grid {
                let cell = RunConfig { latent_dim: d, ..cfg.clone() };
                cell.validate()?;
                let (encoder, _) = fit_encoder(&cell, &seeds, &pool)?;
                let (agent, _) = pretrain(&cell, &seeds, &build_demos(&cell, &encoder, &gen, &pool)?)?;
                finish(format!("latent_dim={d}"), &cell, agent, &encoder)?;
            }
        }
        Ablation::Arch => {
            let (encoder, _) = fit_encoder(cfg, &seeds, &pool)?;
            let demos = build_demos(cfg, &encoder, &gen, &pool)?;
            for (label, attn) in [("attention", true), ("mlp-only", false)] {
                let cell = RunConfig { use_attention: attn, ..cfg.clone() };
                let (agent, _) = pretrain(&cell, &seeds, &demos)?;
                finish(label.into(), &cell, agent, &encoder)?;
            }
        }
        Ablation::LfdVsScratch => {
            let (encoder, _) = fit_encoder(cfg, &seeds, &pool)?;
            let (agent, _) = pretrain(cfg, &seeds, &build_demos(cfg, &encoder, &gen, &pool)?)?;
            finish("lfd-init".into(), cfg, agent, &encoder)?;
            finish("from-scratch".into(), cfg, init_agent(cfg, &seeds)?, &encoder)?;
        }
    }
    Ok(rows)
}

/// Ablation table as comma-separated text with a header line.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("label,score,relative_score,random,heuristic,tau_score,tau_tokens\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.3},{:.6},{:.6},{:.6},{:.3}\n",
            r.label, r.score, r.relative_score, r.random, r.heuristic, r.tau_score, r.tau_tokens
        ));
    }
    out
}

pub const AUTOENCODER_SECTION: &str = "autoencoder";
pub const POLICY_SECTION: &str = "policy";
pub const VALUE_SECTION: &str = "value";

fn is_value_param(name: &str) -> bool {
    name.starts_with("value_")
}

pub fn encoder_sections(ae: &Autoencoder) -> Vec<Section> {
    vec![Section::from_module(AUTOENCODER_SECTION, ae, |_| true)]
}

pub fn agent_sections(agent: &Agent) -> Vec<Section> {
    vec![
        Section::from_module(POLICY_SECTION, agent, |n| !is_value_param(n)),
        Section::from_module(VALUE_SECTION, agent, is_value_param),
    ]
}

fn section<'a>(sections: &'a [Section], name: &str) -> Result<&'a Section> {
    find(sections, name).ok_or_else(|| Error::Format(format!("checkpoint lacks section `{name}`")))
}

/// Restores a frozen autoencoder with the widths of `cfg`.
pub fn encoder_from_sections(cfg: &RunConfig, sections: &[Section]) -> Result<Autoencoder> {
    let mut ae = Autoencoder::new(cfg.ae_dims(), 0);
    section(sections, AUTOENCODER_SECTION)?.load_into(&mut ae, |_| true)?;
    Ok(ae.frozen())
}

pub fn agent_from_sections(cfg: &RunConfig, sections: &[Section]) -> Result<Agent> {
    let mut agent = Agent::new(cfg.agent(), 0)?;
    section(sections, POLICY_SECTION)?.load_into(&mut agent, |n| !is_value_param(n))?;
    section(sections, VALUE_SECTION)?.load_into(&mut agent, is_value_param)?;
    Ok(agent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{decode, encode};
    use crate::nn::Module;

    fn tiny() -> RunConfig {
        RunConfig::parse(
            "n_tokens = 12\ntoken_dim = 8\nquery_dim = 4\nn_relevant = 4\nsignal_rank = 2\n\
             hidden_dim = 6\nlatent_dim = 4\nae_samples = 20\nae_epochs = 2\ndemo_samples = 20\n\
             eval_samples = 10\nmodel_dim = 8\nheads = 2\nff_dim = 8\nlfd_epochs = 2\n\
             ppo_iterations = 2\nrollout_samples = 4\nreward_batch = 2\nppo_minibatch = 4",
        )
        .unwrap()
    }

    #[test]
    fn derived_seeds_are_distinct_and_stable() {
        let a = PhaseSeeds::new(0);
        assert_eq!(a, PhaseSeeds::new(0));
        assert_ne!(a, PhaseSeeds::new(1));
        let all = [a.ae_init, a.ae_train, a.agent_init, a.lfd, a.rl, a.baseline, a.trace];
        for i in 0..all.len() {
            for j in 0..i {
                assert_ne!(all[i], all[j]);
            }
        }
        assert_eq!(derive_seed(7, "x"), derive_seed(7, "x"));
        assert_ne!(derive_seed(7, "x"), derive_seed(7, "y"));
    }

    #[test]
    fn agent_and_encoder_round_trip_through_sections() {
        let cfg = tiny();
        let seeds = PhaseSeeds::new(3);
        let agent = init_agent(&cfg, &seeds).unwrap();
        let back = agent_from_sections(&cfg, &decode(&encode(&agent_sections(&agent)).unwrap()).unwrap()).unwrap();
        let a: Vec<u64> = agent.params().iter().flat_map(|(_, p)| p.value.data().iter().map(|v| v.to_bits())).collect();
        let b: Vec<u64> = back.params().iter().flat_map(|(_, p)| p.value.data().iter().map(|v| v.to_bits())).collect();
        assert_eq!(a, b);
        let ae = Autoencoder::new(cfg.ae_dims(), 9).frozen();
        let back = encoder_from_sections(&cfg, &encoder_sections(&ae)).unwrap();
        assert_eq!(back.encoder, ae.encoder);
        assert!(back.is_frozen());
    }

    #[test]
    fn wrong_shape_checkpoint_rejected() {
        let cfg = tiny();
        let agent = init_agent(&cfg, &PhaseSeeds::new(0)).unwrap();
        let other = RunConfig { model_dim: 12, ..cfg.clone() };
        assert!(agent_from_sections(&other, &agent_sections(&agent)).is_err());
        assert!(agent_from_sections(&cfg, &agent_sections(&agent)[..1]).is_err());
    }

    #[test]
    fn single_cell_ablation_matches_plain_run() {
        let cfg = tiny();
        let plain = run_pipeline(&cfg, 5, false).unwrap();
        let rows = run_ablation(&cfg, 5, &Ablation::TMax(vec![cfg.t_max]), |_| {}).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].score, plain.matched_score());
        assert_eq!(rows[0].tau_score, plain.report.mean_score);
    }
}
