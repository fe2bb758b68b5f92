//! Proximal policy optimization over [`ReachEnv`] rollouts.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::KinematicChain;
use crate::env::{EnvConfig, EnvError, Observation, ReachEnv};
use crate::io::write_atomic;
use crate::objective::{
    evaluate_loss, gradients, LossReport, LossSpec, ObjectiveError, PpoCoefficients, SampleBatch,
};
use crate::policy::{init_policy, Architecture, PolicyError, PolicyParams};

/// Guard added to the advantage standard deviation before normalizing.
pub const ADV_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("parameters diverged at update {update}, epoch {epoch}: {report:?}")]
    Diverged {
        update: usize,
        epoch: usize,
        report: LossReport,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("train log: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub learning_rate: f64,
    /// Transitions collected per environment per update.
    pub n_steps: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub grad_norm_clip: f64,
    pub total_steps: usize,
    pub seed: u64,
    pub n_envs: usize,
    /// Save a checkpoint every this many updates; 0 disables.
    pub checkpoint_every: usize,
    /// On a timeout (not a collision) fold `γ V(s_T)` into the last reward so
    /// truncated episodes are not treated as terminal.
    pub bootstrap_timeouts: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            learning_rate: 3e-4,
            n_steps: 2048,
            epochs: 10,
            minibatch: 64,
            value_coef: 0.5,
            entropy_coef: 0.0,
            grad_norm_clip: 0.5,
            total_steps: 300_000,
            seed: 0,
            n_envs: 1,
            checkpoint_every: 50,
            bootstrap_timeouts: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let fail = |msg: &str| Err(PpoError::Config(msg.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return fail("gamma and gae_lambda must lie in [0, 1]");
        }
        if !(self.clip_eps > 0.0) {
            return fail("clip_eps must be positive");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return fail("learning_rate must be finite and non-negative");
        }
        if self.n_steps == 0 || self.epochs == 0 || self.minibatch == 0 || self.n_envs == 0 {
            return fail("n_steps, epochs, minibatch and n_envs must be positive");
        }
        if self.minibatch > self.n_steps * self.n_envs {
            return fail("minibatch must not exceed the rollout size");
        }
        if !(self.grad_norm_clip > 0.0) {
            return fail("grad_norm_clip must be positive");
        }
        if !(self.value_coef >= 0.0) || !(self.entropy_coef >= 0.0) {
            return fail("loss coefficients must be non-negative");
        }
        Ok(())
    }

    /// `ceil(total_steps / (n_steps · n_envs))`
    pub fn n_updates(&self) -> usize {
        self.total_steps.div_ceil(self.n_steps * self.n_envs)
    }

    pub fn coefficients(&self) -> PpoCoefficients {
        PpoCoefficients {
            clip_eps: self.clip_eps,
            value_coef: self.value_coef,
            entropy_coef: self.entropy_coef,
        }
    }
}

/// One environment's contiguous transitions plus the value of the state
/// reached after the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBuffer {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub log_prob_old: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub bootstrap_value: f64,
}

impl RolloutBuffer {
    pub fn new(obs_dim: usize, act_dim: usize) -> Self {
        Self {
            obs_dim,
            act_dim,
            obs: Vec::new(),
            actions: Vec::new(),
            log_prob_old: Vec::new(),
            rewards: Vec::new(),
            values: Vec::new(),
            dones: Vec::new(),
            bootstrap_value: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn obs_row(&self, t: usize) -> &[f64] {
        &self.obs[t * self.obs_dim..(t + 1) * self.obs_dim]
    }

    pub fn action_row(&self, t: usize) -> &[f64] {
        &self.actions[t * self.act_dim..(t + 1) * self.act_dim]
    }
}

/// Backward recursion
/// `δ_t = r_t + γ V(s_{t+1})(1 − d_t) − V(s_t)`,
/// `A_t = δ_t + γλ(1 − d_t) A_{t+1}`; returns are `A + V`.
pub fn compute_gae(buffer: &RolloutBuffer, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = buffer.len();
    let mut advantages = vec![0.0; n];
    let mut next_value = buffer.bootstrap_value;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if buffer.dones[t] { 0.0 } else { 1.0 };
        let delta = buffer.rewards[t] + gamma * next_value * live - buffer.values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        advantages[t] = next_adv;
        next_value = buffer.values[t];
    }
    let returns = advantages
        .iter()
        .zip(&buffer.values)
        .map(|(a, v)| a + v)
        .collect();
    (advantages, returns)
}

/// Summary of one finished episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStats {
    pub reward: f64,
    pub discounted_return: f64,
    pub length: usize,
    pub final_distance: f64,
    pub collision: bool,
}

/// An environment with its own sampling stream and the episode in progress.
#[derive(Debug, Clone)]
pub struct RolloutWorker {
    env: ReachEnv,
    rng: ChaCha8Rng,
    obs: Observation,
    reward: f64,
    discounted: f64,
    discount: f64,
    length: usize,
}

impl RolloutWorker {
    pub fn new(mut env: ReachEnv, rng: ChaCha8Rng) -> Self {
        let obs = env.reset();
        Self {
            env,
            rng,
            obs,
            reward: 0.0,
            discounted: 0.0,
            discount: 1.0,
            length: 0,
        }
    }

    pub fn env(&self) -> &ReachEnv {
        &self.env
    }

    /// Runs `n_steps` transitions, resetting the environment whenever an
    /// episode ends.
    pub fn collect(
        &mut self,
        params: &PolicyParams,
        n_steps: usize,
        gamma: f64,
        bootstrap_timeouts: bool,
    ) -> Result<(RolloutBuffer, Vec<EpisodeStats>), PpoError> {
        let mut buf = RolloutBuffer::new(self.env.obs_dim(), self.env.action_dim());
        let mut episodes = Vec::new();
        for _ in 0..n_steps {
            let out = params.actor_critic_forward(self.obs.as_slice())?;
            let action = out.dist.sample(&mut self.rng);
            let log_prob = out.dist.log_prob(&action);
            let step = self.env.step(&action)?;

            self.reward += step.reward;
            self.discounted += self.discount * step.reward;
            self.discount *= gamma;
            self.length += 1;

            let mut reward = step.reward;
            if step.info.timeout && !step.info.collision && bootstrap_timeouts {
                reward += gamma * params.value(step.observation.as_slice())?;
            }
            buf.obs.extend_from_slice(self.obs.as_slice());
            buf.actions.extend_from_slice(&action);
            buf.log_prob_old.push(log_prob);
            buf.rewards.push(reward);
            buf.values.push(out.value);
            buf.dones.push(step.done);

            if step.done {
                episodes.push(EpisodeStats {
                    reward: self.reward,
                    discounted_return: self.discounted,
                    length: self.length,
                    final_distance: step.info.distance,
                    collision: step.info.collision,
                });
                self.reward = 0.0;
                self.discounted = 0.0;
                self.discount = 1.0;
                self.length = 0;
                self.obs = self.env.reset();
            } else {
                self.obs = step.observation;
            }
        }
        buf.bootstrap_value = params.value(self.obs.as_slice())?;
        Ok((buf, episodes))
    }
}

/// Collects `n_steps` transitions from every worker, one thread per worker
/// when there is more than one. Each worker owns its RNG, so the result does
/// not depend on scheduling.
pub fn collect_rollouts(
    workers: &mut [RolloutWorker],
    params: &PolicyParams,
    n_steps: usize,
    gamma: f64,
    bootstrap_timeouts: bool,
) -> Result<(Vec<RolloutBuffer>, Vec<EpisodeStats>), PpoError> {
    let results: Vec<_> = if workers.len() == 1 {
        vec![workers[0].collect(params, n_steps, gamma, bootstrap_timeouts)]
    } else {
        thread::scope(|s| {
            let handles: Vec<_> = workers
                .iter_mut()
                .map(|w| s.spawn(move || w.collect(params, n_steps, gamma, bootstrap_timeouts)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("rollout worker panicked"))
                .collect()
        })
    };
    let mut buffers = Vec::with_capacity(results.len());
    let mut episodes = Vec::new();
    for r in results {
        let (b, e) = r?;
        buffers.push(b);
        episodes.extend(e);
    }
    Ok((buffers, episodes))
}

/// Flattens rollouts into a training batch with GAE advantages and returns.
pub fn build_batch(buffers: &[RolloutBuffer], gamma: f64, lambda: f64) -> SampleBatch {
    let (obs_dim, act_dim) = buffers.first().map_or((0, 0), |b| (b.obs_dim, b.act_dim));
    let mut batch = SampleBatch::new(obs_dim, act_dim);
    for buf in buffers {
        let (adv, ret) = compute_gae(buf, gamma, lambda);
        for t in 0..buf.len() {
            batch.push(
                buf.obs_row(t),
                buf.action_row(t),
                buf.log_prob_old[t],
                adv[t],
                ret[t],
            );
        }
    }
    batch
}

/// Shifts and scales advantages to zero mean and unit standard deviation.
pub fn normalize_advantages(advantages: &mut [f64]) {
    let n = advantages.len() as f64;
    if advantages.is_empty() {
        return;
    }
    let mean = advantages.iter().sum::<f64>() / n;
    let var = advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let scale = 1.0 / (var.sqrt() + ADV_NORM_EPS);
    advantages.iter_mut().for_each(|a| *a = (*a - mean) * scale);
}

pub fn ppo_loss(
    params: &PolicyParams,
    batch: &SampleBatch,
    config: &PpoConfig,
) -> Result<LossReport, ObjectiveError> {
    evaluate_loss(params, &LossSpec::Ppo(config.coefficients()), batch)
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Losses averaged over every minibatch of an update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub minibatches: usize,
}

/// `epochs` passes of shuffled minibatch Adam steps. Advantages in `batch`
/// are normalized in place first.
pub fn update(
    params: &PolicyParams,
    optimizer: &mut Adam,
    batch: &mut SampleBatch,
    config: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(PolicyParams, UpdateStats), PpoError> {
    normalize_advantages(&mut batch.advantages);
    let spec = LossSpec::Ppo(config.coefficients());
    let mut next = params.clone();
    let mut stats = UpdateStats::default();
    let mut order: Vec<usize> = (0..batch.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        for rows in order.chunks(config.minibatch) {
            let mb = batch.gather(rows);
            let (report, mut grad) = gradients(&next, &spec, &mb)?;
            let norm = grad.norm();
            if norm > config.grad_norm_clip {
                grad.scale(config.grad_norm_clip / (norm + 1e-6));
            }
            optimizer.step(next.as_mut_slice(), grad.as_slice(), config.learning_rate);
            next.clamp_log_std();
            if !next.is_finite() {
                return Err(PpoError::Diverged {
                    update: 0,
                    epoch,
                    report,
                });
            }
            stats.policy_loss += report.policy_loss;
            stats.value_loss += report.value_loss;
            stats.entropy += report.entropy;
            stats.approx_kl += report.approx_kl;
            stats.clip_fraction += report.clip_fraction;
            stats.grad_norm += norm;
            stats.minibatches += 1;
        }
    }
    let k = stats.minibatches.max(1) as f64;
    stats.policy_loss /= k;
    stats.value_loss /= k;
    stats.entropy /= k;
    stats.approx_kl /= k;
    stats.clip_fraction /= k;
    stats.grad_norm /= k;
    Ok((next, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub update: usize,
    pub steps: usize,
    pub mean_ep_reward: f64,
    pub mean_disc_return: f64,
    pub pi_loss: f64,
    pub v_loss: f64,
    pub approx_kl: f64,
    pub mean_final_dist: f64,
}

/// Per-update learning curve. Episode columns are NaN for updates in which
/// no episode finished.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> Result<Vec<u8>, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.records.is_empty() {
            w.write_record([
                "update",
                "steps",
                "mean_ep_reward",
                "mean_disc_return",
                "pi_loss",
                "v_loss",
                "approx_kl",
                "mean_final_dist",
            ])?;
        }
        for r in &self.records {
            w.serialize(r)?;
        }
        w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self, csv::Error> {
        let mut r = csv::Reader::from_reader(bytes);
        let records = r.deserialize().collect::<Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<(), PpoError> {
        let bytes = self.to_csv()?;
        write_atomic(path, &bytes).map_err(|source| PpoError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn disc_returns(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mean_disc_return).collect()
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Independent stream `stream` of the generator seeded by `seed`.
pub fn derive_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_ENV: u64 = 1 << 32;
const STREAM_ACTION: u64 = 2 << 32;

/// Owns the full training state; [`Trainer::step`] performs one
/// collect/update cycle.
#[derive(Debug)]
pub struct Trainer {
    config: PpoConfig,
    params: PolicyParams,
    optimizer: Adam,
    workers: Vec<RolloutWorker>,
    rng: ChaCha8Rng,
    log: TrainLog,
    steps: usize,
}

impl Trainer {
    pub fn new(
        config: PpoConfig,
        env_config: EnvConfig,
        chain: Arc<KinematicChain>,
    ) -> Result<Self, PpoError> {
        config.validate()?;
        let workers = (0..config.n_envs as u64)
            .map(|i| {
                let env_seed = derive_rng(config.seed, STREAM_ENV + i).next_u64();
                let env = ReachEnv::new(chain.clone(), env_config.clone(), env_seed)?;
                Ok(RolloutWorker::new(
                    env,
                    derive_rng(config.seed, STREAM_ACTION + i),
                ))
            })
            .collect::<Result<Vec<_>, PpoError>>()?;
        let arch = Architecture::new(workers[0].env.obs_dim(), workers[0].env.action_dim());
        let params = init_policy(arch, config.seed);
        Ok(Self {
            optimizer: Adam::new(params.len()),
            rng: derive_rng(config.seed, STREAM_SHUFFLE),
            params,
            workers,
            config,
            log: TrainLog::default(),
            steps: 0,
        })
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn config(&self) -> &PpoConfig {
        &self.config
    }

    pub fn is_finished(&self) -> bool {
        self.log.records.len() >= self.config.n_updates()
    }

    pub fn step(&mut self) -> Result<&TrainRecord, PpoError> {
        let c = &self.config;
        let (buffers, episodes) = collect_rollouts(
            &mut self.workers,
            &self.params,
            c.n_steps,
            c.gamma,
            c.bootstrap_timeouts,
        )?;
        self.steps += buffers.iter().map(RolloutBuffer::len).sum::<usize>();
        let mut batch = build_batch(&buffers, c.gamma, c.gae_lambda);
        let index = self.log.records.len();
        let (params, stats) = match update(
            &self.params,
            &mut self.optimizer,
            &mut batch,
            c,
            &mut self.rng,
        ) {
            Err(PpoError::Diverged { epoch, report, .. }) => {
                return Err(PpoError::Diverged {
                    update: index,
                    epoch,
                    report,
                })
            }
            other => other?,
        };
        self.params = params;
        self.log.records.push(TrainRecord {
            update: index,
            steps: self.steps,
            mean_ep_reward: mean(episodes.iter().map(|e| e.reward)),
            mean_disc_return: mean(episodes.iter().map(|e| e.discounted_return)),
            pi_loss: stats.policy_loss,
            v_loss: stats.value_loss,
            approx_kl: stats.approx_kl,
            mean_final_dist: mean(episodes.iter().map(|e| e.final_distance)),
        });
        Ok(self.log.records.last().expect("just pushed"))
    }

    pub fn into_parts(self) -> (PolicyParams, TrainLog) {
        (self.params, self.log)
    }
}

/// Runs training to completion. With `checkpoint_dir`, parameters are saved
/// as `policy_<update>.ckpt` every `checkpoint_every` updates and the log is
/// rewritten to `train_log.csv` after every update.
pub fn train(
    config: &PpoConfig,
    env_config: &EnvConfig,
    chain: Arc<KinematicChain>,
    checkpoint_dir: Option<&Path>,
) -> Result<(PolicyParams, TrainLog), PpoError> {
    let mut trainer = Trainer::new(config.clone(), env_config.clone(), chain)?;
    while !trainer.is_finished() {
        let done = trainer.step()?.update + 1;
        if let Some(dir) = checkpoint_dir {
            trainer.log.save(&dir.join("train_log.csv"))?;
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
                trainer.params.save(&checkpoint_path(dir, done))?;
            }
        }
    }
    Ok(trainer.into_parts())
}

pub fn checkpoint_path(dir: &Path, update: usize) -> PathBuf {
    dir.join(format!("policy_{update:05}.ckpt"))
}

/// Deterministic-policy evaluation results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean_final_dist: f64,
    pub median_final_dist: f64,
    pub mean_ep_reward: f64,
    /// Fraction of episodes ending within [`SUCCESS_RADIUS`] of the target.
    pub success_rate: f64,
    pub collisions: usize,
    #[serde(skip)]
    pub final_distances: Vec<f64>,
}

pub const SUCCESS_RADIUS: f64 = 0.1;

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs `episodes` full episodes with the mean action.
pub fn evaluate(
    params: &PolicyParams,
    chain: Arc<KinematicChain>,
    env_config: &EnvConfig,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport, PpoError> {
    let mut env = ReachEnv::new(chain, env_config.clone(), seed)?;
    let mut finals = Vec::with_capacity(episodes);
    let mut rewards = Vec::with_capacity(episodes);
    let mut collisions = 0;
    for _ in 0..episodes {
        let mut obs = env.reset();
        let mut total = 0.0;
        loop {
            let action = params.action_mean(obs.as_slice())?;
            let step = env.step(&action)?;
            total += step.reward;
            if step.done {
                finals.push(step.info.distance);
                collisions += usize::from(step.info.collision);
                break;
            }
            obs = step.observation;
        }
        rewards.push(total);
    }
    Ok(EvalReport {
        episodes,
        mean_final_dist: mean(finals.iter().copied()),
        median_final_dist: median(&finals),
        mean_ep_reward: mean(rewards.iter().copied()),
        success_rate: finals.iter().filter(|&&d| d <= SUCCESS_RADIUS).count() as f64
            / episodes.max(1) as f64,
        collisions,
        final_distances: finals,
    })
}
