//! The reaching task: velocity-controlled joints, a sampled 3D target, a dense
//! reward mixing hand-target proximity with head alignment, and episodes that
//! end on timeout or self-collision.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{
    head_direction_from_pose, ChainError, FrameId, KinematicChain, Poses, Vec3, HEAD, RIGHT_HAND,
};

/// Inputs to [`head_reward`] must have unit norm within this tolerance.
pub const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error("episode is done; call reset before stepping")]
    EpisodeDone,
    #[error("expected {expected} action components, got {got}")]
    ActionLength { expected: usize, got: usize },
    #[error("action component {index} is not finite")]
    NonFiniteAction { index: usize },
    #[error("direction vector {which} has norm {norm}, expected 1")]
    NonUnitDirection { which: &'static str, norm: f64 },
    #[error("invalid environment config: {0}")]
    Config(String),
}

/// Weights of the arm and head terms in the combined reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub arm: f64,
    pub head: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            arm: 0.75,
            head: 0.25,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.arm >= 0.0 && self.head >= 0.0) || (self.arm + self.head - 1.0).abs() > 1e-12 {
            return Err(EnvError::Config(format!(
                "reward weights must be non-negative and sum to 1, got {} + {}",
                self.arm, self.head
            )));
        }
        Ok(())
    }
}

/// `exp(-‖hand − target‖)`
pub fn arm_reward(hand: &Vec3, target: &Vec3) -> f64 {
    (-(hand - target).norm()).exp()
}

/// `exp(-‖head_dir − head_to_target‖)` for unit direction vectors.
pub fn head_reward(head_dir: &Vec3, head_to_target: &Vec3) -> Result<f64, EnvError> {
    for (which, v) in [("head_dir", head_dir), ("head_to_target", head_to_target)] {
        let norm = v.norm();
        if !((norm - 1.0).abs() <= UNIT_TOL) {
            return Err(EnvError::NonUnitDirection { which, norm });
        }
    }
    Ok((-(head_dir - head_to_target).norm()).exp())
}

pub fn combined_reward(arm: f64, head: f64, weights: &RewardWeights) -> f64 {
    weights.arm * arm + weights.head * head
}

/// Axis-aligned box targets are drawn from, plus a constant y offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetRanges {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub z: [f64; 2],
    /// Added to every sampled y so the hand aims beside the other hand's joint.
    pub y_offset: f64,
}

impl Default for TargetRanges {
    fn default() -> Self {
        Self {
            x: [0.65, 0.85],
            y: [-0.3, 1.0],
            z: [0.55, 0.9],
            y_offset: 0.05,
        }
    }
}

impl TargetRanges {
    pub fn point(p: Vec3) -> Self {
        Self {
            x: [p.x, p.x],
            y: [p.y, p.y],
            z: [p.z, p.z],
            y_offset: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        for (axis, [lo, hi]) in [("x", self.x), ("y", self.y), ("z", self.z)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(EnvError::Config(format!(
                    "target range {axis} = [{lo}, {hi}] is invalid"
                )));
            }
        }
        if !self.y_offset.is_finite() {
            return Err(EnvError::Config("target y_offset is not finite".into()));
        }
        Ok(())
    }

    /// Lower and upper corners of the box targets can land in (offset applied).
    pub fn bounds(&self) -> (Vec3, Vec3) {
        (
            Vec3::new(self.x[0], self.y[0] + self.y_offset, self.z[0]),
            Vec3::new(self.x[1], self.y[1] + self.y_offset, self.z[1]),
        )
    }
}

pub fn sample_target<R: Rng + ?Sized>(rng: &mut R, ranges: &TargetRanges) -> Vec3 {
    let x = rng.random_range(ranges.x[0]..=ranges.x[1]);
    let y = rng.random_range(ranges.y[0]..=ranges.y[1]);
    let z = rng.random_range(ranges.z[0]..=ranges.z[1]);
    Vec3::new(x, y + ranges.y_offset, z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Control period in seconds (one kinematic integration per tick).
    pub dt: f64,
    /// Episode length in control ticks.
    pub horizon: usize,
    pub weights: RewardWeights,
    pub targets: TargetRanges,
    /// Positions are divided by this (metres) and clamped into [-1, 1].
    pub position_bound: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dt: 1.0 / 50.0,
            horizon: 250,
            weights: RewardWeights::default(),
            targets: TargetRanges::default(),
            position_bound: 1.2,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(EnvError::Config(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if self.horizon == 0 {
            return Err(EnvError::Config("horizon must be at least 1".into()));
        }
        if !(self.position_bound > 0.0 && self.position_bound.is_finite()) {
            return Err(EnvError::Config(format!(
                "position_bound must be positive, got {}",
                self.position_bound
            )));
        }
        self.weights.validate()?;
        self.targets.validate()
    }
}

/// Normalized observation: joint angles, hand position, target position, head
/// direction and head-to-target direction, concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn dof(&self) -> usize {
        self.0.len() - 12
    }

    pub fn joint_angles(&self) -> &[f64] {
        &self.0[..self.dof()]
    }

    pub fn robot_hand(&self) -> &[f64] {
        let d = self.dof();
        &self.0[d..d + 3]
    }

    pub fn target(&self) -> &[f64] {
        let d = self.dof();
        &self.0[d + 3..d + 6]
    }

    pub fn head_dir(&self) -> &[f64] {
        let d = self.dof();
        &self.0[d + 6..d + 9]
    }

    pub fn head_to_target_dir(&self) -> &[f64] {
        let d = self.dof();
        &self.0[d + 9..d + 12]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub q: Vec<f64>,
    pub target: Vec3,
    pub step_count: usize,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// Raw hand-target distance after the step, metres.
    pub distance: f64,
    pub arm_reward: f64,
    pub head_reward: f64,
    pub collision: bool,
    pub timeout: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Geometry derived from one forward-kinematics pass.
struct Snapshot {
    hand: Vec3,
    head_pos: Vec3,
    head_dir: Vec3,
    poses: Poses,
}

/// Unit vector from the head to the target. Falls back to the head direction
/// when the target coincides with the head origin.
pub fn head_to_target(head_pos: &Vec3, head_dir: &Vec3, target: &Vec3) -> Vec3 {
    let d = target - head_pos;
    let n = d.norm();
    if n > 1e-12 {
        d / n
    } else {
        *head_dir
    }
}

pub fn build_observation(
    chain: &KinematicChain,
    config: &EnvConfig,
    state: &EnvState,
) -> Result<Observation, EnvError> {
    let hand = chain.frame_id(RIGHT_HAND)?;
    let head = chain.frame_id(HEAD)?;
    let poses = chain.forward_kinematics(&state.q)?;
    let snap = snapshot(poses, hand, head);
    Ok(observe(chain, config, state, &snap))
}

fn snapshot(poses: Poses, hand: FrameId, head: FrameId) -> Snapshot {
    let head_pose = poses.frame(head);
    Snapshot {
        hand: *poses.frame(hand).translation(),
        head_pos: *head_pose.translation(),
        head_dir: head_direction_from_pose(head_pose),
        poses,
    }
}

fn observe(
    chain: &KinematicChain,
    config: &EnvConfig,
    state: &EnvState,
    snap: &Snapshot,
) -> Observation {
    let mut obs = Vec::with_capacity(chain.dof() + 12);
    for (angle, joint) in state.q.iter().zip(chain.joints()) {
        let (lo, hi) = joint.limits;
        obs.push((2.0 * (angle - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0));
    }
    let bound = config.position_bound;
    for p in [&snap.hand, &state.target] {
        obs.extend(p.iter().map(|c| (c / bound).clamp(-1.0, 1.0)));
    }
    let toward = head_to_target(&snap.head_pos, &snap.head_dir, &state.target);
    obs.extend(snap.head_dir.iter().map(|c| c.clamp(-1.0, 1.0)));
    obs.extend(toward.iter().map(|c| c.clamp(-1.0, 1.0)));
    Observation(obs)
}

/// A single reaching environment. Owns its RNG stream; independent instances
/// can run on separate threads.
#[derive(Debug, Clone)]
pub struct ReachEnv {
    chain: Arc<KinematicChain>,
    config: EnvConfig,
    hand: FrameId,
    head: FrameId,
    state: EnvState,
    rng: ChaCha8Rng,
}

impl ReachEnv {
    pub fn new(chain: Arc<KinematicChain>, config: EnvConfig, seed: u64) -> Result<Self, EnvError> {
        config.validate()?;
        let hand = chain.frame_id(RIGHT_HAND)?;
        let head = chain.frame_id(HEAD)?;
        let q = vec![0.0; chain.dof()];
        if !chain.within_limits(&q) {
            return Err(EnvError::Config(
                "home pose (all zeros) is outside the joint limits".into(),
            ));
        }
        let mut env = Self {
            chain,
            config,
            hand,
            head,
            state: EnvState {
                q,
                target: Vec3::zeros(),
                step_count: 0,
                done: true,
            },
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        env.reset();
        Ok(env)
    }

    pub fn chain(&self) -> &KinematicChain {
        &self.chain
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn obs_dim(&self) -> usize {
        self.chain.dof() + 12
    }

    pub fn action_dim(&self) -> usize {
        self.chain.dof()
    }

    /// Home pose, fresh target, step counter cleared.
    pub fn reset(&mut self) -> Observation {
        self.state.q.iter_mut().for_each(|a| *a = 0.0);
        self.state.target = sample_target(&mut self.rng, &self.config.targets);
        self.state.step_count = 0;
        self.state.done = false;
        self.observation()
    }

    /// Replaces the target mid-episode (dynamic-target mode).
    pub fn set_target(&mut self, target: Vec3) {
        self.state.target = target;
    }

    fn snapshot(&self) -> Snapshot {
        let poses = self
            .chain
            .forward_kinematics(&self.state.q)
            .expect("state length matches chain");
        snapshot(poses, self.hand, self.head)
    }

    pub fn observation(&self) -> Observation {
        observe(&self.chain, &self.config, &self.state, &self.snapshot())
    }

    pub fn hand_position(&self) -> Vec3 {
        self.snapshot().hand
    }

    pub fn hand_distance(&self) -> f64 {
        (self.snapshot().hand - self.state.target).norm()
    }

    /// Integrates `q ← clamp(q + a ⊙ v_max · dt)` with `a` clamped to [-1, 1].
    pub fn step(&mut self, action: &[f64]) -> Result<Step, EnvError> {
        if self.state.done {
            return Err(EnvError::EpisodeDone);
        }
        if action.len() != self.chain.dof() {
            return Err(EnvError::ActionLength {
                expected: self.chain.dof(),
                got: action.len(),
            });
        }
        if let Some(index) = action.iter().position(|a| !a.is_finite()) {
            return Err(EnvError::NonFiniteAction { index });
        }
        let dt = self.config.dt;
        for ((angle, joint), a) in self.state.q.iter_mut().zip(self.chain.joints()).zip(action) {
            *angle = joint.clamp(*angle + a.clamp(-1.0, 1.0) * joint.velocity_limit * dt);
        }
        self.state.step_count += 1;

        let snap = self.snapshot();
        let toward = head_to_target(&snap.head_pos, &snap.head_dir, &self.state.target);
        let arm = arm_reward(&snap.hand, &self.state.target);
        let head = head_reward(&snap.head_dir, &toward)?;
        let reward = combined_reward(arm, head, &self.config.weights);
        let collision = self.chain.collides(&snap.poses);
        let timeout = self.state.step_count >= self.config.horizon;
        self.state.done = collision || timeout;
        Ok(Step {
            observation: observe(&self.chain, &self.config, &self.state, &snap),
            reward,
            done: self.state.done,
            info: StepInfo {
                distance: (snap.hand - self.state.target).norm(),
                arm_reward: arm,
                head_reward: head,
                collision,
                timeout,
            },
        })
    }
}
