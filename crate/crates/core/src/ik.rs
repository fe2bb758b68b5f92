//! Damped-least-squares inverse kinematics for hand position targets.
//!
//! Used to decide whether a sampled target is reachable at all and as an
//! independent baseline for what a learned policy should achieve.

use nalgebra::{DVector, Dyn, Matrix3, Matrix3xX, OMatrix, U3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{ChainError, FrameId, KinematicChain, Vec3};
use crate::env::{sample_target, TargetRanges};

#[derive(Debug, Error, PartialEq)]
pub enum IkError {
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error("target is not finite")]
    NonFiniteTarget,
    #[error("initial configuration is outside the joint limits")]
    StartOutsideLimits,
    #[error("invalid IK parameters: {0}")]
    Params(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IkParams {
    pub damping: f64,
    pub max_iters: usize,
    /// Position residual (metres) counted as converged.
    pub tolerance: f64,
    /// Largest per-joint change in one iteration, radians.
    pub step_clamp: f64,
}

impl Default for IkParams {
    fn default() -> Self {
        Self {
            damping: 0.05,
            max_iters: 200,
            tolerance: 1e-3,
            step_clamp: 0.2,
        }
    }
}

impl IkParams {
    pub fn validate(&self) -> Result<(), IkError> {
        if !(self.damping > 0.0 && self.tolerance > 0.0 && self.step_clamp > 0.0) {
            return Err(IkError::Params(format!(
                "damping, tolerance and step_clamp must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkResult {
    pub q: Vec<f64>,
    /// Distance from the frame to the target at `q`, metres.
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Moves `frame` toward `target` using only the joints that move it.
///
/// Each iteration applies `Δq = Jᵀ(JJᵀ + d²I)⁻¹ e`, rescaled so that no joint
/// moves more than `step_clamp`, and projects onto the joint limits. A step that does not
/// reduce the residual is rejected and the step length halved. If the descent
/// stalls before converging, the rest of the iteration budget is spent on a
/// second descent from the middle of the joint ranges. The best iterate seen
/// is returned, so the residual never exceeds the one at `q0`.
pub fn solve_ik(
    chain: &KinematicChain,
    frame: &str,
    target: &Vec3,
    q0: &[f64],
    params: &IkParams,
) -> Result<IkResult, IkError> {
    params.validate()?;
    if !target.iter().all(|v| v.is_finite()) {
        return Err(IkError::NonFiniteTarget);
    }
    let id = chain.frame_id(frame)?;
    if q0.len() != chain.dof() {
        return Err(ChainError::LengthMismatch {
            expected: chain.dof(),
            got: q0.len(),
        }
        .into());
    }
    if !chain.within_limits(q0) {
        return Err(IkError::StartOutsideLimits);
    }
    Ok(solve_validated(chain, id, target, q0, params))
}

fn solve_validated(
    chain: &KinematicChain,
    id: FrameId,
    target: &Vec3,
    q0: &[f64],
    params: &IkParams,
) -> IkResult {
    let active = chain.ancestor_joints(id);
    let mut best = descend(chain, id, &active, target, q0, params, params.max_iters);
    // A stall short of the tolerance is a local minimum, usually with joints
    // pinned at their limits. Spend the remaining budget from mid-range.
    if !best.converged && best.iterations < params.max_iters {
        let mut mid = q0.to_vec();
        for &j in &active {
            let joint = &chain.joints()[j];
            mid[j] = 0.5 * (joint.lower() + joint.upper());
        }
        let budget = params.max_iters - best.iterations;
        let retry = descend(chain, id, &active, target, &mid, params, budget);
        let used = best.iterations + retry.iterations;
        if retry.residual < best.residual {
            best = retry;
        }
        best.iterations = used;
    }
    best
}

fn descend(
    chain: &KinematicChain,
    id: FrameId,
    active: &[usize],
    target: &Vec3,
    q0: &[f64],
    params: &IkParams,
    max_iters: usize,
) -> IkResult {
    let damping_sq = params.damping * params.damping;

    let mut q = q0.to_vec();
    let mut poses = chain.forward_kinematics(&q).expect("length checked");
    let mut current = (target - poses.frame(id).translation()).norm();
    let mut best_q = q.clone();
    let mut best = current;
    let mut iterations = 0;
    // Fraction of the clamped DLS step taken; halved whenever a step fails to
    // reduce the residual, restored gradually after successful steps.
    let mut scale = 1.0;
    let mut trial = q.clone();

    while best > params.tolerance && iterations < max_iters {
        iterations += 1;
        let err = target - poses.frame(id).translation();
        let full = chain.jacobian_from_poses(&poses, id);
        let Some(dq) = limit_aware_step(chain, &full, active, &q, &err, damping_sq) else {
            break;
        };
        // Uniform rescale keeps the DLS direction, which is always a descent
        // direction; clamping components independently would not be.
        let largest = dq.amax();
        let shrink = if largest > params.step_clamp {
            params.step_clamp / largest
        } else {
            1.0
        };
        trial.copy_from_slice(&q);
        for (&j, d) in active.iter().zip(dq.iter()) {
            trial[j] = chain.joints()[j].clamp(q[j] + scale * shrink * d);
        }
        let trial_poses = chain.forward_kinematics(&trial).expect("length checked");
        let residual = (target - trial_poses.frame(id).translation()).norm();
        if residual < current {
            q.copy_from_slice(&trial);
            poses = trial_poses;
            current = residual;
            scale = (scale * 2.0).min(1.0);
            if residual < best {
                best = residual;
                best_q.copy_from_slice(&q);
            }
        } else {
            scale *= 0.5;
            if scale < 1e-12 {
                break;
            }
        }
    }

    IkResult {
        q: best_q,
        residual: best,
        converged: best <= params.tolerance,
        iterations,
    }
}

/// DLS step over the active joints. Joints sitting on a limit whose step
/// would push them further out are frozen and the step is recomputed
/// without them, so a saturated joint cannot stall the others.
fn limit_aware_step(
    chain: &KinematicChain,
    full: &Matrix3xX<f64>,
    active: &[usize],
    q: &[f64],
    err: &Vec3,
    damping_sq: f64,
) -> Option<DVector<f64>> {
    let mut free = vec![true; active.len()];
    loop {
        let mut jac: OMatrix<f64, U3, Dyn> = full.select_columns(active.iter());
        for (c, f) in free.iter().enumerate() {
            if !f {
                jac.column_mut(c).fill(0.0);
            }
        }
        let gram: Matrix3<f64> = &jac * jac.transpose() + Matrix3::identity() * damping_sq;
        let dq: DVector<f64> = jac.transpose() * gram.cholesky()?.solve(err);
        let mut changed = false;
        for (c, &j) in active.iter().enumerate() {
            let joint = &chain.joints()[j];
            let pushing_out =
                (q[j] <= joint.lower() && dq[c] < 0.0) || (q[j] >= joint.upper() && dq[c] > 0.0);
            if free[c] && pushing_out {
                free[c] = false;
                changed = true;
            }
        }
        if !changed {
            return Some(dq);
        }
    }
}

/// Summary of IK reachability over sampled targets.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReachabilityReport {
    pub n_targets: usize,
    pub reachable: usize,
    pub fraction: f64,
    pub residual_min: f64,
    pub residual_median: f64,
    pub residual_p90: f64,
    pub residual_max: f64,
    /// Best residual per target, in sampling order.
    #[serde(skip)]
    pub residuals: Vec<f64>,
}

/// Samples `n` targets and reports how many the hand can reach.
///
/// Each target is attempted from the home pose and then from `restarts`
/// random in-limit poses; the best residual counts.
pub fn reachability<R: Rng + ?Sized>(
    chain: &KinematicChain,
    frame: &str,
    ranges: &TargetRanges,
    n: usize,
    restarts: usize,
    params: &IkParams,
    rng: &mut R,
) -> Result<ReachabilityReport, IkError> {
    params.validate()?;
    let id = chain.frame_id(frame)?;
    let home = vec![0.0; chain.dof()];
    if !chain.within_limits(&home) {
        return Err(IkError::StartOutsideLimits);
    }
    let mut residuals = Vec::with_capacity(n);
    for _ in 0..n {
        let target = sample_target(rng, ranges);
        let mut best = solve_validated(chain, id, &target, &home, params).residual;
        for _ in 0..restarts {
            if best <= params.tolerance {
                break;
            }
            let start: Vec<f64> = chain
                .joints()
                .iter()
                .map(|j| rng.random_range(j.lower()..=j.upper()))
                .collect();
            best = best.min(solve_validated(chain, id, &target, &start, params).residual);
        }
        residuals.push(best);
    }
    let reachable = residuals.iter().filter(|&&r| r <= params.tolerance).count();
    let mut sorted = residuals.clone();
    sorted.sort_by(f64::total_cmp);
    let pick = |p: f64| -> f64 {
        if sorted.is_empty() {
            f64::NAN
        } else {
            sorted[((sorted.len() - 1) as f64 * p).round() as usize]
        }
    };
    Ok(ReachabilityReport {
        n_targets: n,
        reachable,
        fraction: if n == 0 {
            f64::NAN
        } else {
            reachable as f64 / n as f64
        },
        residual_min: pick(0.0),
        residual_median: pick(0.5),
        residual_p90: pick(0.9),
        residual_max: pick(1.0),
        residuals,
    })
}
