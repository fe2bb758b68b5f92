//! Actor-critic multilayer perceptrons with a diagonal Gaussian action head.
//!
//! All parameters live in one flat `Vec<f64>`; a [`Layout`] maps named
//! tensors onto it. Gradients use the same type, which keeps the optimizer,
//! norm clipping and finite-difference checks trivial.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const LOG_STD_INIT: f64 = -0.5;

/// `½ ln(2π)`
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

const CHECKPOINT_MAGIC: &str = "reach-policy-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("expected observation of length {expected}, got {got}")]
    ObsDim { expected: usize, got: usize },
    #[error("expected action of length {expected}, got {got}")]
    ActionDim { expected: usize, got: usize },
    #[error("checkpoint line {line}: {msg}")]
    Checkpoint { line: usize, msg: String },
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub hidden: Vec<usize>,
}

impl Architecture {
    /// Two tanh hidden layers of 64 units for both actor and critic.
    pub fn new(obs_dim: usize, act_dim: usize) -> Self {
        Self {
            obs_dim,
            act_dim,
            hidden: vec![64, 64],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub n_in: usize,
    pub n_out: usize,
    /// Offset of the row-major `n_out × n_in` weight matrix.
    pub weight: usize,
    /// Offset of the `n_out` bias vector.
    pub bias: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

/// Placement of every tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub actor: Vec<LayerSpec>,
    pub critic: Vec<LayerSpec>,
    pub log_std: usize,
    pub tensors: Vec<TensorSpec>,
    pub len: usize,
}

impl Layout {
    pub fn new(arch: &Architecture) -> Self {
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut net = |prefix: &str, out_dim: usize, tensors: &mut Vec<TensorSpec>| {
            let mut dims = vec![arch.obs_dim];
            dims.extend(&arch.hidden);
            dims.push(out_dim);
            let mut layers = Vec::new();
            for (i, w) in dims.windows(2).enumerate() {
                let (n_in, n_out) = (w[0], w[1]);
                tensors.push(TensorSpec {
                    name: format!("{prefix}.{i}.weight"),
                    rows: n_out,
                    cols: n_in,
                    offset,
                });
                let weight = offset;
                offset += n_in * n_out;
                tensors.push(TensorSpec {
                    name: format!("{prefix}.{i}.bias"),
                    rows: n_out,
                    cols: 1,
                    offset,
                });
                let bias = offset;
                offset += n_out;
                layers.push(LayerSpec {
                    n_in,
                    n_out,
                    weight,
                    bias,
                });
            }
            layers
        };
        let actor = net("actor", arch.act_dim, &mut tensors);
        let critic = net("critic", 1, &mut tensors);
        tensors.push(TensorSpec {
            name: "log_std".into(),
            rows: arch.act_dim,
            cols: 1,
            offset,
        });
        let log_std = offset;
        offset += arch.act_dim;
        Self {
            actor,
            critic,
            log_std,
            tensors,
            len: offset,
        }
    }
}

/// Policy parameters, or a gradient with the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    arch: Architecture,
    layout: Layout,
    data: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(arch: Architecture) -> Self {
        let layout = Layout::new(&arch);
        let data = vec![0.0; layout.len];
        Self { arch, layout, data }
    }

    pub fn zeros_like(other: &PolicyParams) -> Self {
        Self {
            arch: other.arch.clone(),
            layout: other.layout.clone(),
            data: vec![0.0; other.data.len()],
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn log_std(&self) -> &[f64] {
        &self.data[self.layout.log_std..self.layout.log_std + self.arch.act_dim]
    }

    pub fn log_std_mut(&mut self) -> &mut [f64] {
        let start = self.layout.log_std;
        &mut self.data[start..start + self.arch.act_dim]
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &self.data[t.offset..t.offset + t.rows * t.cols])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    pub fn clamp_log_std(&mut self) {
        for v in self.log_std_mut() {
            *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }
}

/// Orthogonal initialisation: hidden layers with gain √2, the action-mean
/// layer with gain 0.01, the value layer with gain 1, zero biases and
/// `log_std = -0.5`. Deterministic for a given seed.
pub fn init_policy(arch: Architecture, seed: u64) -> PolicyParams {
    let mut params = PolicyParams::zeros(arch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = params.layout.clone();
    for (layers, out_gain) in [(&layout.actor, 0.01), (&layout.critic, 1.0)] {
        for (i, layer) in layers.iter().enumerate() {
            let gain = if i + 1 == layers.len() {
                out_gain
            } else {
                std::f64::consts::SQRT_2
            };
            let w = orthogonal(layer.n_out, layer.n_in, gain, &mut rng);
            params.data[layer.weight..layer.weight + w.len()].copy_from_slice(&w);
        }
    }
    params.log_std_mut().fill(LOG_STD_INIT);
    params
}

/// Row-major `rows × cols` matrix with orthonormal rows or columns, scaled by
/// `gain`.
fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let gauss = DMatrix::<f64>::from_fn(tall, short, |_, _| StandardNormal.sample(rng));
    let qr = gauss.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let q = if rows >= cols { q } else { q.transpose() };
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(gain * q[(i, j)]);
        }
    }
    out
}

/// Diagonal Gaussian over actions.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianActionDist {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GaussianActionDist {
    /// `Σ −(a−μ)²/(2σ²) − ln σ − ½ ln 2π`
    pub fn log_prob(&self, action: &[f64]) -> f64 {
        gaussian_log_prob(&self.mean, &self.std, action)
    }

    /// `Σ ½ ln(2πe) + ln σ`
    pub fn entropy(&self) -> f64 {
        gaussian_entropy(&self.std)
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| {
                let z: f64 = StandardNormal.sample(rng);
                m + s * z
            })
            .collect()
    }
}

pub fn gaussian_log_prob(mean: &[f64], std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(std)
        .zip(action)
        .map(|((m, s), a)| {
            let z = (a - m) / s;
            -0.5 * z * z - s.ln() - HALF_LN_2PI
        })
        .sum()
}

pub fn gaussian_entropy(std: &[f64]) -> f64 {
    std.iter().map(|s| 0.5 + HALF_LN_2PI + s.ln()).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorCriticOutput {
    pub dist: GaussianActionDist,
    pub value: f64,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone, Default)]
pub(crate) struct MlpTrace {
    /// Input to each layer followed by the network output.
    pub acts: Vec<Vec<f64>>,
}

pub(crate) fn mlp_forward(params: &[f64], layers: &[LayerSpec], x: &[f64], trace: &mut MlpTrace) {
    trace.acts.resize_with(layers.len() + 1, Vec::new);
    trace.acts[0].clear();
    trace.acts[0].extend_from_slice(x);
    for (l, layer) in layers.iter().enumerate() {
        let (before, after) = trace.acts.split_at_mut(l + 1);
        let input = &before[l];
        let out = &mut after[0];
        out.clear();
        let w = &params[layer.weight..layer.weight + layer.n_in * layer.n_out];
        let b = &params[layer.bias..layer.bias + layer.n_out];
        let last = l + 1 == layers.len();
        for (row, bias) in w.chunks_exact(layer.n_in).zip(b) {
            let z = bias + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
            out.push(if last { z } else { z.tanh() });
        }
    }
}

/// Accumulates `∂L/∂θ` into `grads` given `∂L/∂output`.
pub(crate) fn mlp_backward(
    params: &[f64],
    layers: &[LayerSpec],
    trace: &MlpTrace,
    grad_out: &[f64],
    grads: &mut [f64],
) {
    let mut delta = grad_out.to_vec();
    let mut next = Vec::new();
    for (l, layer) in layers.iter().enumerate().rev() {
        let input = &trace.acts[l];
        {
            let gw = &mut grads[layer.weight..layer.weight + layer.n_in * layer.n_out];
            for (row, d) in gw.chunks_exact_mut(layer.n_in).zip(&delta) {
                if *d == 0.0 {
                    continue;
                }
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            let gb = &mut grads[layer.bias..layer.bias + layer.n_out];
            for (g, d) in gb.iter_mut().zip(&delta) {
                *g += d;
            }
        }
        if l == 0 {
            break;
        }
        // Propagate through W and the tanh of the previous layer.
        let w = &params[layer.weight..layer.weight + layer.n_in * layer.n_out];
        next.clear();
        next.resize(layer.n_in, 0.0);
        for (row, d) in w.chunks_exact(layer.n_in).zip(&delta) {
            for (n, w) in next.iter_mut().zip(row) {
                *n += d * w;
            }
        }
        for (n, h) in next.iter_mut().zip(input) {
            *n *= 1.0 - h * h;
        }
        std::mem::swap(&mut delta, &mut next);
    }
}

impl PolicyParams {
    fn check_obs(&self, obs: &[f64]) -> Result<(), PolicyError> {
        if obs.len() != self.arch.obs_dim {
            return Err(PolicyError::ObsDim {
                expected: self.arch.obs_dim,
                got: obs.len(),
            });
        }
        Ok(())
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std().iter().map(|l| l.exp()).collect()
    }

    pub fn actor_critic_forward(&self, obs: &[f64]) -> Result<ActorCriticOutput, PolicyError> {
        self.check_obs(obs)?;
        let mut trace = MlpTrace::default();
        mlp_forward(&self.data, &self.layout.actor, obs, &mut trace);
        let mean = trace.acts.last().cloned().unwrap_or_default();
        let value = self.value(obs)?;
        Ok(ActorCriticOutput {
            dist: GaussianActionDist {
                mean,
                std: self.std(),
            },
            value,
        })
    }

    pub fn action_mean(&self, obs: &[f64]) -> Result<Vec<f64>, PolicyError> {
        self.check_obs(obs)?;
        let mut trace = MlpTrace::default();
        mlp_forward(&self.data, &self.layout.actor, obs, &mut trace);
        Ok(trace.acts.pop().unwrap_or_default())
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64, PolicyError> {
        self.check_obs(obs)?;
        let mut trace = MlpTrace::default();
        mlp_forward(&self.data, &self.layout.critic, obs, &mut trace);
        Ok(trace.acts.last().map(|v| v[0]).unwrap_or_default())
    }

    // ------------------------------------------------------------------
    // Checkpoints
    // ------------------------------------------------------------------

    /// Text checkpoint: a versioned header, then each tensor as
    /// `tensor <name> <rows> <cols>` followed by `rows` lines of
    /// space-separated values in shortest round-trip notation.
    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
        let _ = writeln!(out, "obs_dim {}", self.arch.obs_dim);
        let _ = writeln!(out, "act_dim {}", self.arch.act_dim);
        let hidden: Vec<String> = self.arch.hidden.iter().map(|h| h.to_string()).collect();
        let _ = writeln!(out, "hidden {}", hidden.join(" "));
        for t in &self.layout.tensors {
            let _ = writeln!(out, "tensor {} {} {}", t.name, t.rows, t.cols);
            let values = &self.data[t.offset..t.offset + t.rows * t.cols];
            for row in values.chunks(t.cols) {
                let row: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
                let _ = writeln!(out, "{}", row.join(" "));
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self, PolicyError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| PolicyError::Checkpoint {
                line: 0,
                msg: format!("unexpected end of file, expected {what}"),
            })
        };
        let bad = |line: usize, msg: String| PolicyError::Checkpoint { line, msg };

        let (ln, header) = next("header")?;
        let version = header
            .strip_prefix(CHECKPOINT_MAGIC)
            .map(str::trim)
            .ok_or_else(|| bad(ln, "not a policy checkpoint".into()))?;
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(bad(ln, format!("unsupported version `{version}`")));
        }
        let mut field = |key: &str| -> Result<Vec<usize>, PolicyError> {
            let (ln, line) = next(key)?;
            let rest = line
                .strip_prefix(key)
                .ok_or_else(|| bad(ln, format!("expected `{key}`")))?;
            rest.split_whitespace()
                .map(|v| v.parse().map_err(|_| bad(ln, format!("bad integer `{v}`"))))
                .collect()
        };
        let obs_dim = *field("obs_dim")?
            .first()
            .ok_or_else(|| bad(2, "missing obs_dim".into()))?;
        let act_dim = *field("act_dim")?
            .first()
            .ok_or_else(|| bad(3, "missing act_dim".into()))?;
        let hidden = field("hidden")?;
        let mut params = PolicyParams::zeros(Architecture {
            obs_dim,
            act_dim,
            hidden,
        });
        for t in params.layout.tensors.clone() {
            let (ln, line) = next("tensor header")?;
            let expected = format!("tensor {} {} {}", t.name, t.rows, t.cols);
            if line != expected {
                return Err(bad(ln, format!("expected `{expected}`, found `{line}`")));
            }
            for r in 0..t.rows {
                let (ln, line) = next("tensor row")?;
                let row: Vec<f64> = line
                    .split_whitespace()
                    .map(|v| v.parse().map_err(|_| bad(ln, format!("bad number `{v}`"))))
                    .collect::<Result<_, _>>()?;
                if row.len() != t.cols {
                    return Err(bad(
                        ln,
                        format!("expected {} values, found {}", t.cols, row.len()),
                    ));
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(bad(ln, "non-finite parameter".into()));
                }
                let start = t.offset + r * t.cols;
                params.data[start..start + t.cols].copy_from_slice(&row);
            }
        }
        let (ln, line) = next("end")?;
        if line != "end" {
            return Err(bad(ln, format!("expected `end`, found `{line}`")));
        }
        Ok(params)
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Self::from_checkpoint_str(&std::fs::read_to_string(path)?)
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        crate::io::write_atomic(path, self.to_checkpoint_string().as_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arch() -> Architecture {
        Architecture::new(18, 6)
    }

    #[test]
    fn layout_covers_default_architecture() {
        let p = PolicyParams::zeros(arch());
        let expected = (18 * 64 + 64)
            + (64 * 64 + 64)
            + (64 * 6 + 6)
            + (18 * 64 + 64)
            + (64 * 64 + 64)
            + (64 + 1)
            + 6;
        assert_eq!(p.len(), expected);
        assert_eq!(p.layout().tensors.last().unwrap().name, "log_std");
    }

    #[test]
    fn init_is_seeded() {
        let a = init_policy(arch(), 1);
        assert_eq!(a, init_policy(arch(), 1));
        assert_ne!(a, init_policy(arch(), 2));
        assert!(a.is_finite());
        assert!(a.as_slice().iter().all(|w| w.abs() < 10.0));
        assert!(a.log_std().iter().all(|&l| l == LOG_STD_INIT));
    }

    #[test]
    fn init_rows_are_orthogonal() {
        let p = init_policy(arch(), 3);
        // actor.1 is 64×64 with gain √2: W Wᵀ = 2 I.
        let w = p.tensor("actor.1.weight").unwrap();
        let m = DMatrix::from_row_slice(64, 64, w);
        let g = &m * m.transpose();
        assert!((g - DMatrix::identity(64, 64) * 2.0).amax() < 1e-12);
        // actor.0 is 64×18: orthonormal columns scaled by √2.
        let w = p.tensor("actor.0.weight").unwrap();
        let m = DMatrix::from_row_slice(64, 18, w);
        assert!((m.transpose() * &m - DMatrix::identity(18, 18) * 2.0).amax() < 1e-12);
    }

    #[test]
    fn zero_params_give_zero_outputs() {
        let p = PolicyParams::zeros(arch());
        let out = p.actor_critic_forward(&[0.3; 18]).unwrap();
        assert!(out.dist.mean.iter().all(|&m| m == 0.0));
        assert_eq!(out.value, 0.0);
        assert!(out.dist.std.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn forward_is_pure() {
        let p = init_policy(arch(), 4);
        let obs: Vec<f64> = (0..18).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = p.actor_critic_forward(&obs).unwrap();
        assert_eq!(a, p.actor_critic_forward(&obs).unwrap());
        let std: Vec<f64> = p.log_std().iter().map(|l| l.exp()).collect();
        assert_eq!(a.dist.std, std);
    }

    #[test]
    fn obs_dimension_checked() {
        let p = init_policy(arch(), 4);
        assert!(matches!(
            p.actor_critic_forward(&[0.0; 17]),
            Err(PolicyError::ObsDim {
                expected: 18,
                got: 17
            })
        ));
    }

    #[test]
    fn log_prob_closed_forms() {
        assert!((gaussian_log_prob(&[0.0], &[1.0], &[0.0]) + 0.9189385).abs() < 1e-6);
        let mu = [0.1, -0.2, 0.3, 0.0, 0.5, -0.7];
        let lp = gaussian_log_prob(&mu, &[1.0; 6], &mu);
        assert!((lp + 6.0 * 0.9189385).abs() < 1e-6);
    }

    #[test]
    fn log_prob_integrates_to_one() {
        // Trapezoid rule on [μ − 10σ, μ + 10σ].
        let (mu, sigma) = (0.3, 0.7);
        let n = 20_000;
        let (lo, hi) = (mu - 10.0 * sigma, mu + 10.0 * sigma);
        let h = (hi - lo) / n as f64;
        let f = |x: f64| gaussian_log_prob(&[mu], &[sigma], &[x]).exp();
        let mut total = 0.5 * (f(lo) + f(hi));
        for i in 1..n {
            total += f(lo + i as f64 * h);
        }
        assert!((total * h - 1.0).abs() < 1e-3);
    }

    #[test]
    fn entropy_closed_forms() {
        assert!((gaussian_entropy(&[1.0]) - 1.4189385).abs() < 1e-6);
        let base = gaussian_entropy(&[0.5, 0.8]);
        let doubled = gaussian_entropy(&[1.0, 1.6]);
        assert!((doubled - base - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let a = GaussianActionDist {
            mean: vec![0.0, 0.0],
            std: vec![0.5, 0.8],
        };
        let b = GaussianActionDist {
            mean: vec![3.0, -1.0],
            std: vec![0.5, 0.8],
        };
        assert_eq!(a.entropy(), b.entropy());
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(PolicyParams::from_checkpoint_str("hello").is_err());
        let text = init_policy(arch(), 1).to_checkpoint_string();
        let truncated: String = text.lines().take(40).map(|l| format!("{l}\n")).collect();
        assert!(PolicyParams::from_checkpoint_str(&truncated).is_err());
        let wrong_version = text.replacen("checkpoint 1", "checkpoint 9", 1);
        assert!(PolicyParams::from_checkpoint_str(&wrong_version).is_err());
    }

    #[test]
    fn checkpoint_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.ckpt");
        let p = init_policy(arch(), 8);
        p.save(&path).unwrap();
        assert_eq!(PolicyParams::load(&path).unwrap(), p);
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, 1..64)) {
            let mut p = PolicyParams::zeros(Architecture { obs_dim: 3, act_dim: 2, hidden: vec![4] });
            for (slot, v) in p.as_mut_slice().iter_mut().zip(values.iter().cycle()) {
                *slot = *v;
            }
            let back = PolicyParams::from_checkpoint_str(&p.to_checkpoint_string()).unwrap();
            let bits = |q: &PolicyParams| q.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&p));
        }
    }
}
