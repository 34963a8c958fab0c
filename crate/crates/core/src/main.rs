use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use token_pruner::checkpoint::{load_checkpoint, save_checkpoint, write_atomic};
use token_pruner::config::RunConfig;
use token_pruner::data::{load_data, save_data, DataFile, DemoRecord};
use token_pruner::eval::{trace, EvalReport};
use token_pruner::pipeline::{self, Ablation, PhaseSeeds};
use token_pruner::{Error, Result};

const SAMPLES_FILE: &str = "samples.tprl";
const EVAL_FILE: &str = "eval.tprl";
const DEMOS_FILE: &str = "demos.tprl";
const AE_CKPT: &str = "autoencoder.ckpt";
const LFD_CKPT: &str = "policy_lfd.ckpt";
const POLICY_CKPT: &str = "policy.ckpt";
const NONFINITE_CKPT: &str = "policy_nonfinite.ckpt";

#[derive(Parser)]
#[command(name = "token-pruner", version, about = "Train and evaluate a sequential visual-token pruning policy")]
struct Cli {
    /// `key = value` run configuration; absent keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Log progress to stderr (`-vv` for per-epoch detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training pool and the held-out evaluation set.
    GenData,
    /// Fit and freeze the token autoencoder.
    TrainAe,
    /// Label heuristic pruning trajectories over the training pool.
    GenDemos,
    /// Behavior-clone the policy on the demonstrations.
    PretrainPolicy,
    /// Fine-tune the policy with PPO.
    TrainPpo {
        /// Start from a random policy instead of the pretrained one.
        #[arg(long)]
        from_scratch: bool,
    },
    /// One-shot threshold pruning on the evaluation set.
    Eval {
        /// Retention threshold; defaults to `tau` from the config.
        #[arg(long)]
        tau: Option<f64>,
        /// Policy checkpoint to evaluate instead of `<out>/policy.ckpt`.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Record stochastic multi-step rollouts step by step.
    Trace {
        /// Number of evaluation samples to trace.
        #[arg(long, default_value_t = 4)]
        samples: usize,
    },
    /// Run a comparison grid, one full pipeline per cell.
    Ablate {
        #[arg(value_enum)]
        kind: AblationKind,
        /// Comma-separated grid for `tmax` and `dimension`.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationKind {
    Tmax,
    Dimension,
    Arch,
    LfdVsScratch,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainAe => "train-ae",
            Command::GenDemos => "gen-demos",
            Command::PretrainPolicy => "pretrain-policy",
            Command::TrainPpo { .. } => "train-ppo",
            Command::Eval { .. } => "eval",
            Command::Trace { .. } => "trace",
            Command::Ablate { .. } => "ablate",
        }
    }
}

struct StderrLogger;

impl log::Log for StderrLogger {
    fn enabled(&self, m: &log::Metadata) -> bool {
        m.level() <= log::max_level()
    }

    fn log(&self, r: &log::Record) {
        if self.enabled(r.metadata()) {
            eprintln!("[{}] {}", r.level().as_str().to_lowercase(), r.args());
        }
    }

    fn flush(&self) {}
}

static LOGGER: StderrLogger = StderrLogger;

struct Ctx {
    cfg: RunConfig,
    seeds: PhaseSeeds,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Path of an artifact produced by an earlier phase.
    fn require(&self, name: &str, phase: &'static str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::Dependency { phase, path: p })
        }
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

fn load_encoder(ctx: &Ctx) -> Result<token_pruner::autoencoder::Autoencoder> {
    pipeline::encoder_from_sections(&ctx.cfg, &load_checkpoint(&ctx.require(AE_CKPT, "train-ae")?)?)
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let gen = pipeline::generator(&ctx.cfg)?;
    let g = gen.config();
    let pool = pipeline::pool_samples(&ctx.cfg, &ctx.seeds, &gen);
    let eval = pipeline::eval_samples(&ctx.cfg, &ctx.seeds, &gen);
    println!("training pool: {} samples; evaluation set: {} samples", pool.len(), eval.len());
    save_data(&DataFile::new(g.n_tokens, g.token_dim, g.query_dim, pool), &ctx.path(SAMPLES_FILE))?;
    save_data(&DataFile::new(g.n_tokens, g.token_dim, g.query_dim, eval), &ctx.path(EVAL_FILE))
}

fn train_ae(ctx: &Ctx) -> Result<()> {
    let data = load_data(&ctx.require(SAMPLES_FILE, "gen-data")?)?;
    let (ae, log) = pipeline::fit_encoder(&ctx.cfg, &ctx.seeds, &data.samples)?;
    write_jsonl(&ctx.path("ae_metrics.jsonl"), &log)?;
    let last = log.last().expect("report per epoch");
    println!("held-out relative reconstruction error {:.4} after {} epochs", last.relative_error, last.epoch);
    save_checkpoint(&pipeline::encoder_sections(&ae), &ctx.path(AE_CKPT))
}

fn gen_demos(ctx: &Ctx) -> Result<()> {
    let mut data = load_data(&ctx.require(SAMPLES_FILE, "gen-data")?)?;
    let encoder = load_encoder(ctx)?;
    let gen = pipeline::generator(&ctx.cfg)?;
    let demos = pipeline::build_demos(&ctx.cfg, &encoder, &gen, &data.samples)?;
    data.samples.truncate(demos.len());
    data.demos = Some(demos.iter().map(DemoRecord::from_trajectory).collect());
    println!("{} demonstration trajectories, {} labelled tokens", demos.len(), demos.iter().map(|d| d.token_count()).sum::<usize>());
    save_data(&data, &ctx.path(DEMOS_FILE))
}

fn pretrain_policy(ctx: &Ctx) -> Result<()> {
    let data = load_data(&ctx.require(DEMOS_FILE, "gen-demos")?)?;
    let encoder = load_encoder(ctx)?;
    let demos = data.materialize_demos(&encoder)?;
    let (agent, log) = pipeline::pretrain(&ctx.cfg, &ctx.seeds, &demos)?;
    write_jsonl(&ctx.path("lfd_metrics.jsonl"), &log)?;
    let last = log.last().expect("report per epoch");
    println!(
        "held-out BCE {:.4}, label agreement {:.4} after {} epochs",
        last.held_out_loss, last.held_out_agreement, last.epoch
    );
    save_checkpoint(&pipeline::agent_sections(&agent), &ctx.path(LFD_CKPT))
}

fn train_ppo(ctx: &Ctx, from_scratch: bool) -> Result<()> {
    let encoder = load_encoder(ctx)?;
    let mut agent = if from_scratch {
        pipeline::init_agent(&ctx.cfg, &ctx.seeds)?
    } else {
        pipeline::agent_from_sections(&ctx.cfg, &load_checkpoint(&ctx.require(LFD_CKPT, "pretrain-policy")?)?)?
    };
    let gen = pipeline::generator(&ctx.cfg)?;
    let log_path = ctx.path("ppo_metrics.jsonl");
    let tmp = ctx.path(".ppo_metrics.jsonl.tmp");
    let mut log = BufWriter::new(File::create(&tmp)?);
    let result = pipeline::fine_tune(&ctx.cfg, &ctx.seeds, &mut agent, &encoder, &gen, |row| {
        serde_json::to_writer(&mut log, row)?;
        log.write_all(b"\n")?;
        Ok(())
    });
    log.flush()?;
    drop(log);
    fs::rename(&tmp, &log_path)?;
    match result {
        Ok(rows) => {
            if let Some(r) = rows.last() {
                println!(
                    "iteration {}: mean reward {:.4}, mean score {:.4}, mean tokens {:.2}",
                    r.iteration, r.mean_reward, r.mean_score, r.mean_tokens
                );
            }
            save_checkpoint(&pipeline::agent_sections(&agent), &ctx.path(POLICY_CKPT))
        }
        Err(e @ Error::NonFinite { .. }) => {
            save_checkpoint(&pipeline::agent_sections(&agent), &ctx.path(NONFINITE_CKPT))?;
            Err(e)
        }
        Err(e) => Err(e),
    }
}

fn summary_table(report: &EvalReport, tau: f64) -> String {
    let mut s = format!(
        "tau {tau}: mean retained tokens {:.2} (rate {:.4}), mean score {:.4}, relative score {:.2}%\n",
        report.mean_retained,
        report.retention_rate,
        report.mean_score,
        report.relative_score()
    );
    s.push_str(&format!("full-mask score {:.4}\n", report.full_score));
    for (k, v) in &report.baselines {
        s.push_str(&format!("{k:<18} {v:.4}\n"));
    }
    s.push_str("tau    tokens   score\n");
    for p in &report.per_tau {
        s.push_str(&format!("{:<6} {:>7.2} {:>7.4}\n", p.tau, p.mean_tokens, p.mean_score));
    }
    s
}

fn eval(ctx: &Ctx, tau: Option<f64>, policy: Option<PathBuf>) -> Result<()> {
    let tau = tau.unwrap_or(ctx.cfg.tau);
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config {
            key: "tau".into(),
            reason: "must lie in [0, 1]".into(),
        });
    }
    let data = load_data(&ctx.require(EVAL_FILE, "gen-data")?)?;
    let encoder = load_encoder(ctx)?;
    let policy = match policy {
        Some(p) if p.is_file() => p,
        Some(p) => return Err(Error::Dependency { phase: "train-ppo", path: p }),
        None => ctx.require(POLICY_CKPT, "train-ppo")?,
    };
    let agent = pipeline::agent_from_sections(&ctx.cfg, &load_checkpoint(&policy)?)?;
    let gen = pipeline::generator(&ctx.cfg)?;
    let report = pipeline::assess(&ctx.cfg, &ctx.seeds, &agent, &encoder, &gen, &data.samples, tau)?;
    let mut csv = String::from("tau,mean_tokens,mean_score\n");
    for p in &report.per_tau {
        csv.push_str(&format!("{},{:.4},{:.6}\n", p.tau, p.mean_tokens, p.mean_score));
    }
    write_atomic(&ctx.path("eval_tau.csv"), csv.as_bytes())?;
    write_atomic(&ctx.path("eval.json"), &serde_json::to_vec_pretty(&report)?)?;
    print!("{}", summary_table(&report, tau));
    Ok(())
}

fn run_trace(ctx: &Ctx, n: usize) -> Result<()> {
    let data = load_data(&ctx.require(EVAL_FILE, "gen-data")?)?;
    let encoder = load_encoder(ctx)?;
    let agent = pipeline::agent_from_sections(&ctx.cfg, &load_checkpoint(&ctx.require(POLICY_CKPT, "train-ppo")?)?)?;
    let rollout = ctx.cfg.rollout();
    let records = data
        .samples
        .iter()
        .take(n)
        .enumerate()
        .map(|(i, s)| trace(&agent, &encoder, s, &rollout, ctx.seeds.trace.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    for r in &records {
        let counts: Vec<String> = r.steps.iter().map(|s| format!("{}:{:.3}", s.retained, s.score)).collect();
        println!("sample {}: {}", r.sample_seed, counts.join(" -> "));
    }
    write_jsonl(&ctx.path("trace.jsonl"), &records)
}

fn ablate(ctx: &Ctx, kind: AblationKind, grid: Vec<usize>) -> Result<()> {
    let need_grid = |default: Vec<usize>| if grid.is_empty() { default } else { grid.clone() };
    let ablation = match kind {
        AblationKind::Tmax => Ablation::TMax(need_grid(vec![1, 2, 3, 4, 5])),
        AblationKind::Dimension => Ablation::Dimension(need_grid(vec![2, 4, 8, 16])),
        AblationKind::Arch => Ablation::Arch,
        AblationKind::LfdVsScratch => Ablation::LfdVsScratch,
    };
    let rows = pipeline::run_ablation(&ctx.cfg, ctx.seeds.master, &ablation, |r| {
        println!("{:<16} score {:.4} ({:.2}% of full), random {:.4}, heuristic {:.4}", r.label, r.score, r.relative_score, r.random, r.heuristic);
    })?;
    write_atomic(&ctx.path(&format!("ablation_{}.csv", ablation.name())), pipeline::ablation_csv(&rows).as_bytes())?;
    write_jsonl(&ctx.path(&format!("ablation_{}.jsonl", ablation.name())), &rows)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) if !p.is_file() => return Err(Error::Config {
            key: "--config".into(),
            reason: format!("{} is not a readable file", p.display()),
        }),
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    fs::create_dir_all(&cli.out)?;
    let name = cli.command.name();
    write_atomic(&cli.out.join(format!("{name}.config")), cfg.echo().as_bytes())?;
    let ctx = Ctx {
        seeds: PhaseSeeds::new(cfg.seed),
        cfg,
        out: cli.out,
    };
    match cli.command {
        Command::GenData => gen_data(&ctx),
        Command::TrainAe => train_ae(&ctx),
        Command::GenDemos => gen_demos(&ctx),
        Command::PretrainPolicy => pretrain_policy(&ctx),
        Command::TrainPpo { from_scratch } => train_ppo(&ctx, from_scratch),
        Command::Eval { tau, policy } => eval(&ctx, tau, policy),
        Command::Trace { samples } => run_trace(&ctx, samples),
        Command::Ablate { kind, grid } => ablate(&ctx, kind, grid),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    log::set_logger(&LOGGER).expect("logger installed once");
    log::set_max_level(match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    });
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
