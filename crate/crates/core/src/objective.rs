//! Scalar training losses over sample batches and their exact gradients.

use thiserror::Error;

use crate::policy::{
    gaussian_entropy, mlp_backward, mlp_forward, MlpTrace, PolicyParams, HALF_LN_2PI,
};

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error(
        "batch dimensions {obs_dim}/{act_dim} do not match the policy ({policy_obs}/{policy_act})"
    )]
    Dimensions {
        obs_dim: usize,
        act_dim: usize,
        policy_obs: usize,
        policy_act: usize,
    },
    #[error("sample {index}: probability ratio is not finite (log_prob new {log_prob_new}, old {log_prob_old})")]
    NonFiniteRatio {
        index: usize,
        log_prob_new: f64,
        log_prob_old: f64,
    },
    #[error("loss is not finite: {0:?}")]
    NonFiniteLoss(LossReport),
}

/// Flat, row-major storage of training samples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleBatch {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub log_prob_old: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl SampleBatch {
    pub fn new(obs_dim: usize, act_dim: usize) -> Self {
        Self {
            obs_dim,
            act_dim,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.returns.is_empty()
    }

    pub fn push(
        &mut self,
        obs: &[f64],
        action: &[f64],
        log_prob_old: f64,
        advantage: f64,
        ret: f64,
    ) {
        debug_assert_eq!(obs.len(), self.obs_dim);
        debug_assert_eq!(action.len(), self.act_dim);
        self.obs.extend_from_slice(obs);
        self.actions.extend_from_slice(action);
        self.log_prob_old.push(log_prob_old);
        self.advantages.push(advantage);
        self.returns.push(ret);
    }

    pub fn obs_row(&self, i: usize) -> &[f64] {
        &self.obs[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn action_row(&self, i: usize) -> &[f64] {
        &self.actions[i * self.act_dim..(i + 1) * self.act_dim]
    }

    /// Copies the listed rows into a new batch.
    pub fn gather(&self, rows: &[usize]) -> SampleBatch {
        let mut out = SampleBatch::new(self.obs_dim, self.act_dim);
        for &i in rows {
            out.push(
                self.obs_row(i),
                self.action_row(i),
                self.log_prob_old[i],
                self.advantages[i],
                self.returns[i],
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoCoefficients {
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

/// Which scalar loss to evaluate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossSpec {
    /// `mean (V(s) − R)²`
    ValueMse,
    /// `−mean min(ρÂ, clip(ρ)Â) + c_v mean (V − R)² − c_e mean H`
    Ppo(PpoCoefficients),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub total: f64,
    /// Negated mean clipped surrogate.
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// `mean((ρ − 1) − ln ρ)`
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub mean_surrogate: f64,
}

/// `min(ρÂ, clip(ρ, 1−ε, 1+ε)Â)`
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    (ratio * advantage).min(clipped * advantage)
}

/// Derivative of [`clipped_surrogate`] with respect to the ratio: `Â` where
/// the unclipped branch is active, zero where the clip holds.
fn clipped_surrogate_slope(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    if ratio * advantage <= clipped * advantage {
        advantage
    } else {
        0.0
    }
}

pub fn evaluate_loss(
    params: &PolicyParams,
    spec: &LossSpec,
    batch: &SampleBatch,
) -> Result<LossReport, ObjectiveError> {
    run(params, spec, batch, None)
}

/// Loss value plus `∂loss/∂θ` for every parameter.
pub fn gradients(
    params: &PolicyParams,
    spec: &LossSpec,
    batch: &SampleBatch,
) -> Result<(LossReport, PolicyParams), ObjectiveError> {
    let mut grad = PolicyParams::zeros_like(params);
    let report = run(params, spec, batch, Some(grad.as_mut_slice()))?;
    Ok((report, grad))
}

fn run(
    params: &PolicyParams,
    spec: &LossSpec,
    batch: &SampleBatch,
    mut grads: Option<&mut [f64]>,
) -> Result<LossReport, ObjectiveError> {
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let arch = params.arch();
    if batch.obs_dim != arch.obs_dim || batch.act_dim != arch.act_dim {
        return Err(ObjectiveError::Dimensions {
            obs_dim: batch.obs_dim,
            act_dim: batch.act_dim,
            policy_obs: arch.obs_dim,
            policy_act: arch.act_dim,
        });
    }
    let layout = params.layout().clone();
    let theta = params.as_slice();
    let n = batch.len() as f64;
    let log_std = params.log_std().to_vec();
    let std: Vec<f64> = log_std.iter().map(|l| l.exp()).collect();
    let log_std_sum: f64 = log_std.iter().sum();

    let mut actor = MlpTrace::default();
    let mut critic = MlpTrace::default();
    let mut d_mean = vec![0.0; arch.act_dim];
    let mut d_log_std = vec![0.0; arch.act_dim];
    let mut report = LossReport::default();

    for i in 0..batch.len() {
        let obs = batch.obs_row(i);
        mlp_forward(theta, &layout.critic, obs, &mut critic);
        let value = critic.acts.last().expect("critic output")[0];
        let diff = value - batch.returns[i];
        report.value_loss += diff * diff / n;

        let value_weight = match spec {
            LossSpec::ValueMse => 1.0,
            LossSpec::Ppo(c) => c.value_coef,
        };
        if let Some(g) = grads.as_deref_mut() {
            mlp_backward(
                theta,
                &layout.critic,
                &critic,
                &[2.0 * value_weight * diff / n],
                g,
            );
        }

        let LossSpec::Ppo(coefs) = spec else {
            continue;
        };
        mlp_forward(theta, &layout.actor, obs, &mut actor);
        let mean = actor.acts.last().expect("actor output");
        let action = batch.action_row(i);
        let mut log_prob = -log_std_sum - HALF_LN_2PI * arch.act_dim as f64;
        for k in 0..arch.act_dim {
            let z = (action[k] - mean[k]) / std[k];
            log_prob -= 0.5 * z * z;
        }
        let ratio = (log_prob - batch.log_prob_old[i]).exp();
        if !ratio.is_finite() {
            return Err(ObjectiveError::NonFiniteRatio {
                index: i,
                log_prob_new: log_prob,
                log_prob_old: batch.log_prob_old[i],
            });
        }
        let adv = batch.advantages[i];
        let surrogate = clipped_surrogate(ratio, adv, coefs.clip_eps);
        report.mean_surrogate += surrogate / n;
        report.approx_kl += ((ratio - 1.0) - ratio.ln()) / n;
        if (ratio - 1.0).abs() > coefs.clip_eps {
            report.clip_fraction += 1.0 / n;
        }

        if let Some(g) = grads.as_deref_mut() {
            let d_log_prob = -clipped_surrogate_slope(ratio, adv, coefs.clip_eps) * ratio / n;
            if d_log_prob != 0.0 {
                for k in 0..arch.act_dim {
                    let z = (action[k] - mean[k]) / std[k];
                    d_mean[k] = d_log_prob * z / std[k];
                    d_log_std[k] += d_log_prob * (z * z - 1.0);
                }
                mlp_backward(theta, &layout.actor, &actor, &d_mean, g);
            }
        }
    }

    report.policy_loss = -report.mean_surrogate;
    match spec {
        LossSpec::ValueMse => report.total = report.value_loss,
        LossSpec::Ppo(coefs) => {
            report.entropy = gaussian_entropy(&std);
            report.total = report.policy_loss + coefs.value_coef * report.value_loss
                - coefs.entropy_coef * report.entropy;
            if let Some(g) = grads {
                // ∂H/∂log_std = 1 per dimension; H does not depend on the state.
                for (k, d) in d_log_std.iter().enumerate() {
                    g[layout.log_std + k] += d - coefs.entropy_coef;
                }
            }
        }
    }
    if !report.total.is_finite() {
        return Err(ObjectiveError::NonFiniteLoss(report));
    }
    Ok(report)
}
