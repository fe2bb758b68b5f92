//! `reach`: train, evaluate and roll out reaching policies.

mod rollout;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use reach_core::chain::RIGHT_HAND;
use reach_core::config::RunConfig;
use reach_core::ik::reachability;
use reach_core::io::write_atomic;
use reach_core::policy::{init_policy, Architecture, PolicyParams};
use reach_core::ppo::{checkpoint_path, derive_rng, evaluate, TrainLog, Trainer};

#[derive(Debug, Parser)]
#[command(name = "reach", version, about = "Train and run arm-reaching policies")]
struct Cli {
    /// TOML run configuration; defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training seed and seeds evaluation and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for artifacts.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a policy, writing checkpoints and train_log.csv.
    Train(TrainArgs),
    /// Evaluate a checkpoint with deterministic actions.
    Eval(EvalArgs),
    /// Closed-loop rollout toward a fixed or perceived target.
    Rollout(rollout::RolloutArgs),
    /// Estimate how much of the target box the hand can reach.
    IkCheck(IkCheckArgs),
    /// Split a training log into plot-ready series.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    total_steps: Option<usize>,
    #[arg(long)]
    n_envs: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "untrained")]
    checkpoint: Option<PathBuf>,
    /// Evaluate a freshly initialized policy instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    untrained: bool,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
}

#[derive(Debug, Args)]
struct IkCheckArgs {
    #[arg(long, default_value_t = 1000)]
    targets: usize,
    /// Random restarts per target after the attempt from home.
    #[arg(long, default_value_t = 2)]
    restarts: usize,
}

#[derive(Debug, Args)]
struct ExportArgs {
    /// A train_log.csv written by `reach train`.
    #[arg(long)]
    log: PathBuf,
}

/// Errors split by exit status.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

trait Classify<T> {
    fn config_err(self) -> Result<T, Failure>;
    fn runtime_err(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config_err(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Config(e.into()))
    }

    fn runtime_err(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

pub(crate) struct RunContext {
    pub config: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path).config_err()?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.ppo.seed = seed;
    }
    let ctx = RunContext {
        seed: cli.seed.unwrap_or(config.ppo.seed),
        config,
        out: cli.out,
    };
    match cli.command {
        Command::Train(args) => train(ctx, args),
        Command::Eval(args) => eval(&ctx, args),
        Command::Rollout(args) => rollout::run(&ctx, args),
        Command::IkCheck(args) => ik_check(&ctx, args),
        Command::Export(args) => export(&ctx, args),
    }
}

pub(crate) fn create_out(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .runtime_err()
}

pub(crate) fn write_artifact(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    write_atomic(path, bytes)
        .with_context(|| format!("writing {}", path.display()))
        .runtime_err()
}

pub(crate) fn load_checkpoint(path: &Path) -> Result<PolicyParams, Failure> {
    PolicyParams::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .runtime_err()
}

fn train(mut ctx: RunContext, args: TrainArgs) -> Result<(), Failure> {
    if let Some(n) = args.total_steps {
        ctx.config.ppo.total_steps = n;
    }
    if let Some(n) = args.n_envs {
        ctx.config.ppo.n_envs = n;
    }
    ctx.config.validate().config_err()?;
    let chain = Arc::new(ctx.config.build_chain().config_err()?);
    let ppo = ctx.config.ppo.clone();
    let mut trainer = Trainer::new(ppo.clone(), ctx.config.env.clone(), chain).config_err()?;
    create_out(&ctx.out)?;
    write_artifact(
        &ctx.out.join("config.toml"),
        ctx.config.to_toml().as_bytes(),
    )?;

    while !trainer.is_finished() {
        let r = *trainer.step().runtime_err()?;
        println!(
            "update {:>4}  steps {:>8}  ep_reward {:>8.3}  disc_return {:>8.3}  final_dist {:.3}  pi_loss {:>8.4}  v_loss {:>8.4}  kl {:.5}",
            r.update, r.steps, r.mean_ep_reward, r.mean_disc_return, r.mean_final_dist, r.pi_loss, r.v_loss, r.approx_kl
        );
        let done = r.update + 1;
        write_artifact(
            &ctx.out.join("train_log.csv"),
            &trainer.log().to_csv().runtime_err()?,
        )?;
        if ppo.checkpoint_every > 0 && done % ppo.checkpoint_every == 0 {
            save_params(trainer.params(), &checkpoint_path(&ctx.out, done))?;
        }
    }
    let final_path = ctx.out.join("policy_final.ckpt");
    save_params(trainer.params(), &final_path)?;
    println!("wrote {}", final_path.display());
    Ok(())
}

fn save_params(params: &PolicyParams, path: &Path) -> Result<(), Failure> {
    params
        .save(path)
        .with_context(|| format!("writing {}", path.display()))
        .runtime_err()
}

fn eval(ctx: &RunContext, args: EvalArgs) -> Result<(), Failure> {
    if args.episodes == 0 {
        return Err(Failure::Config(anyhow!("--episodes must be positive")));
    }
    let chain = Arc::new(ctx.config.build_chain().config_err()?);
    let params = match &args.checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => init_policy(
            Architecture::new(obs_dim(chain.dof()), chain.dof()),
            ctx.seed,
        ),
    };
    check_policy_fits(&params, chain.dof())?;
    let report =
        evaluate(&params, chain, &ctx.config.env, args.episodes, ctx.seed).runtime_err()?;
    let json = serde_json::to_string_pretty(&report).runtime_err()?;
    println!("{json}");
    create_out(&ctx.out)?;
    write_artifact(&ctx.out.join("eval.json"), json.as_bytes())
}

/// Joint angles plus hand, target, head direction and head-to-target vectors.
fn obs_dim(dof: usize) -> usize {
    dof + 12
}

pub(crate) fn check_policy_fits(params: &PolicyParams, dof: usize) -> Result<(), Failure> {
    let arch = params.arch();
    if arch.act_dim != dof || arch.obs_dim != obs_dim(dof) {
        return Err(Failure::Runtime(anyhow!(
            "checkpoint expects {} observations and {} actions, the chain has {dof} joints",
            arch.obs_dim,
            arch.act_dim
        )));
    }
    Ok(())
}

fn ik_check(ctx: &RunContext, args: IkCheckArgs) -> Result<(), Failure> {
    if args.targets == 0 {
        return Err(Failure::Config(anyhow!("--targets must be positive")));
    }
    let chain = ctx.config.build_chain().config_err()?;
    let mut rng = derive_rng(ctx.seed, 0);
    let report = reachability(
        &chain,
        RIGHT_HAND,
        &ctx.config.env.targets,
        args.targets,
        args.restarts,
        &ctx.config.ik,
        &mut rng,
    )
    .runtime_err()?;
    let json = serde_json::to_string_pretty(&report).runtime_err()?;
    println!("{json}");
    create_out(&ctx.out)?;
    write_artifact(&ctx.out.join("ik_check.json"), json.as_bytes())
}

fn export(ctx: &RunContext, args: ExportArgs) -> Result<(), Failure> {
    let bytes = std::fs::read(&args.log)
        .with_context(|| format!("reading {}", args.log.display()))
        .runtime_err()?;
    let log = TrainLog::from_csv(&bytes)
        .with_context(|| format!("parsing {}", args.log.display()))
        .runtime_err()?;
    if log.records.is_empty() {
        return Err(Failure::Runtime(anyhow!(
            "{} has no rows",
            args.log.display()
        )));
    }
    let series =
        |name: &str, value: fn(&reach_core::ppo::TrainRecord) -> f64| -> anyhow::Result<Vec<u8>> {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["steps", name])?;
            for r in &log.records {
                w.write_record([r.steps.to_string(), value(r).to_string()])?;
            }
            Ok(w.into_inner()?)
        };
    let disc = series("mean_disc_return", |r| r.mean_disc_return).runtime_err()?;
    let dist = series("mean_final_dist", |r| r.mean_final_dist).runtime_err()?;
    create_out(&ctx.out)?;
    write_artifact(&ctx.out.join("disc_return.csv"), &disc)?;
    write_artifact(&ctx.out.join("final_dist.csv"), &dist)?;
    println!("exported {} rows", log.records.len());
    Ok(())
}

pub(crate) fn parse_point(s: &str) -> anyhow::Result<[f64; 3]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        bail!("expected x,y,z");
    }
    let mut p = [0.0; 3];
    for (slot, text) in p.iter_mut().zip(parts) {
        let v: f64 = text
            .parse()
            .with_context(|| format!("bad coordinate {text:?}"))?;
        if !v.is_finite() {
            bail!("coordinate {text:?} is not finite");
        }
        *slot = v;
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_parse() {
        assert_eq!(parse_point("0.7, -0.2,0.8").unwrap(), [0.7, -0.2, 0.8]);
        assert!(parse_point("1,2").is_err());
        assert!(parse_point("1,2,x").is_err());
        assert!(parse_point("1,2,inf").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
