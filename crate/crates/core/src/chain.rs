//! Kinematic model of the reaching robot.
//!
//! A [`KinematicChain`] is a tree of revolute joints stored in topological
//! order. Each joint frame is `parent_frame * fixed_offset * Rot(axis, q)`.
//! Named end effectors hang off a joint with a fixed offset, and collision
//! spheres are attached to joint frames for a cheap self-collision test.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Matrix3xX, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Tolerance used when validating unit axes and rotation matrices.
pub const GEOMETRY_TOL: f64 = 1e-9;

/// Frame name of the hand the policy drives.
pub const RIGHT_HAND: &str = "right_hand";
/// Frame name of the head (camera carrier, tracking direction).
pub const HEAD: &str = "head";

#[derive(Debug, Error, PartialEq)]
pub enum ChainError {
    #[error("chain has no joints")]
    Empty,
    #[error("duplicate frame name `{0}`")]
    DuplicateName(String),
    #[error("joint `{joint}`: rotation axis {axis:?} is not unit length")]
    NonUnitAxis { joint: String, axis: [f64; 3] },
    #[error("joint `{joint}`: lower limit {lo} must be strictly below upper limit {hi}")]
    InvalidLimits { joint: String, lo: f64, hi: f64 },
    #[error("joint `{joint}`: velocity limit {limit} must be positive")]
    InvalidVelocityLimit { joint: String, limit: f64 },
    #[error("`{child}` references parent `{parent}` which is not an earlier joint")]
    DanglingParent { child: String, parent: String },
    #[error("collision sphere {index}: radius {radius} must be positive")]
    InvalidSphere { index: usize, radius: f64 },
    #[error("{what} contains a non-finite value")]
    NonFinite { what: String },
    #[error("rotation is not orthonormal with det +1")]
    InvalidRotation,
    #[error("expected {expected} joint angles, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("unknown frame `{0}`")]
    UnknownFrame(String),
    #[error("malformed chain document: {0}")]
    Parse(String),
}

/// Proper rigid motion: rotation followed by translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a transform, rejecting rotations that are not orthonormal with
    /// determinant +1 (within [`GEOMETRY_TOL`]).
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self, ChainError> {
        if !rotation
            .iter()
            .chain(translation.iter())
            .all(|v| v.is_finite())
        {
            return Err(ChainError::NonFinite {
                what: "rigid transform".into(),
            });
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if ortho > GEOMETRY_TOL || (rotation.determinant() - 1.0).abs() > GEOMETRY_TOL {
            return Err(ChainError::InvalidRotation);
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation of `angle` radians about a unit `axis`.
    pub fn from_axis_angle(axis: &Unit<Vec3>, angle: f64) -> Self {
        Self {
            rotation: *Rotation3::from_axis_angle(axis, angle).matrix(),
            translation: Vec3::zeros(),
        }
    }

    /// URDF-style origin: fixed-axis roll, pitch, yaw then translation.
    pub fn from_xyz_rpy(xyz: [f64; 3], rpy: [f64; 3]) -> Self {
        Self {
            rotation: *Rotation3::from_euler_angles(rpy[0], rpy[1], rpy[2]).matrix(),
            translation: Vec3::from(xyz),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `R·p + t`
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }
}

#[derive(Debug, Clone)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    pub offset: RigidTransform,
    pub axis: Unit<Vec3>,
    pub limits: (f64, f64),
    pub velocity_limit: f64,
}

impl Joint {
    pub fn lower(&self) -> f64 {
        self.limits.0
    }

    pub fn upper(&self) -> f64 {
        self.limits.1
    }

    pub fn clamp(&self, angle: f64) -> f64 {
        angle.clamp(self.limits.0, self.limits.1)
    }
}

#[derive(Debug, Clone)]
pub struct EndEffector {
    pub name: String,
    pub joint: usize,
    pub offset: RigidTransform,
}

#[derive(Debug, Clone)]
pub struct CollisionSphere {
    pub joint: usize,
    pub center: Vec3,
    pub radius: f64,
}

/// Handle to a named frame resolved once against a chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameId {
    Joint(usize),
    Effector(usize),
}

/// Validated, immutable kinematic tree.
#[derive(Debug, Clone)]
pub struct KinematicChain {
    joints: Vec<Joint>,
    end_effectors: Vec<EndEffector>,
    spheres: Vec<CollisionSphere>,
    /// `ancestors[j][k]` is true when joint `k` moves the frame of joint `j`
    /// (including `k == j`).
    ancestors: Vec<Vec<bool>>,
}

/// Poses of every joint frame and end effector in the base frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Poses {
    pub joints: Vec<RigidTransform>,
    pub effectors: Vec<RigidTransform>,
}

impl Poses {
    pub fn frame(&self, id: FrameId) -> &RigidTransform {
        match id {
            FrameId::Joint(j) => &self.joints[j],
            FrameId::Effector(e) => &self.effectors[e],
        }
    }
}

impl KinematicChain {
    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn end_effectors(&self) -> &[EndEffector] {
        &self.end_effectors
    }

    pub fn collision_spheres(&self) -> &[CollisionSphere] {
        &self.spheres
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    /// Resolves a frame name; end effector names take precedence over joint
    /// names (names are unique across both, so this never matters in practice).
    pub fn frame_id(&self, name: &str) -> Result<FrameId, ChainError> {
        if let Some(e) = self.end_effectors.iter().position(|e| e.name == name) {
            return Ok(FrameId::Effector(e));
        }
        self.joint_index(name)
            .map(FrameId::Joint)
            .ok_or_else(|| ChainError::UnknownFrame(name.to_string()))
    }

    /// Joint that carries the frame.
    pub fn frame_joint(&self, id: FrameId) -> usize {
        match id {
            FrameId::Joint(j) => j,
            FrameId::Effector(e) => self.end_effectors[e].joint,
        }
    }

    /// Indices of joints that move the frame, root first.
    pub fn ancestor_joints(&self, id: FrameId) -> Vec<usize> {
        let j = self.frame_joint(id);
        (0..self.joints.len())
            .filter(|&k| self.ancestors[j][k])
            .collect()
    }

    /// Is `a` the parent of `b` or vice versa.
    pub fn adjacent(&self, a: usize, b: usize) -> bool {
        self.joints[a].parent == Some(b) || self.joints[b].parent == Some(a)
    }

    pub fn lower_limits(&self) -> Vec<f64> {
        self.joints.iter().map(Joint::lower).collect()
    }

    pub fn upper_limits(&self) -> Vec<f64> {
        self.joints.iter().map(Joint::upper).collect()
    }

    pub fn clamp_to_limits(&self, q: &mut [f64]) {
        for (angle, joint) in q.iter_mut().zip(&self.joints) {
            *angle = joint.clamp(*angle);
        }
    }

    pub fn within_limits(&self, q: &[f64]) -> bool {
        q.len() == self.joints.len()
            && q.iter()
                .zip(&self.joints)
                .all(|(a, j)| *a >= j.lower() && *a <= j.upper())
    }

    fn check_len(&self, q: &[f64]) -> Result<(), ChainError> {
        if q.len() != self.joints.len() {
            return Err(ChainError::LengthMismatch {
                expected: self.joints.len(),
                got: q.len(),
            });
        }
        Ok(())
    }

    pub fn forward_kinematics(&self, q: &[f64]) -> Result<Poses, ChainError> {
        self.check_len(q)?;
        let mut joints: Vec<RigidTransform> = Vec::with_capacity(self.joints.len());
        for (joint, &angle) in self.joints.iter().zip(q) {
            let parent = joint
                .parent
                .map(|p| joints[p])
                .unwrap_or_else(RigidTransform::identity);
            let frame = parent
                .compose(&joint.offset)
                .compose(&RigidTransform::from_axis_angle(&joint.axis, angle));
            joints.push(frame);
        }
        let effectors = self
            .end_effectors
            .iter()
            .map(|e| joints[e.joint].compose(&e.offset))
            .collect();
        Ok(Poses { joints, effectors })
    }

    /// Forward kinematics keyed by frame name (joints and end effectors).
    pub fn frame_poses(&self, q: &[f64]) -> Result<BTreeMap<String, RigidTransform>, ChainError> {
        let poses = self.forward_kinematics(q)?;
        let mut map = BTreeMap::new();
        for (j, pose) in self.joints.iter().zip(&poses.joints) {
            map.insert(j.name.clone(), *pose);
        }
        for (e, pose) in self.end_effectors.iter().zip(&poses.effectors) {
            map.insert(e.name.clone(), *pose);
        }
        Ok(map)
    }

    pub fn frame_position(&self, q: &[f64], frame: &str) -> Result<Vec3, ChainError> {
        let id = self.frame_id(frame)?;
        Ok(*self.forward_kinematics(q)?.frame(id).translation())
    }

    /// Positional Jacobian (3 × dof, metres per radian) of a frame origin.
    pub fn jacobian(&self, q: &[f64], frame: &str) -> Result<Matrix3xX<f64>, ChainError> {
        let id = self.frame_id(frame)?;
        let poses = self.forward_kinematics(q)?;
        Ok(self.jacobian_from_poses(&poses, id))
    }

    /// Jacobian using already computed poses. Column `k` is
    /// `axis_k × (p_frame − p_k)` for joints on the frame's ancestor path and
    /// zero otherwise.
    pub fn jacobian_from_poses(&self, poses: &Poses, id: FrameId) -> Matrix3xX<f64> {
        let target = *poses.frame(id).translation();
        let carrier = self.frame_joint(id);
        let mut jac = Matrix3xX::zeros(self.joints.len());
        for (k, joint) in self.joints.iter().enumerate() {
            if !self.ancestors[carrier][k] {
                continue;
            }
            let frame = &poses.joints[k];
            let axis = frame.transform_vector(joint.axis.as_ref());
            let col = axis.cross(&(target - frame.translation()));
            jac.set_column(k, &col);
        }
        jac
    }

    /// Head forward direction: the head frame's local +x axis in base frame.
    pub fn head_direction(&self, q: &[f64]) -> Result<Vec3, ChainError> {
        let id = self.frame_id(HEAD)?;
        let poses = self.forward_kinematics(q)?;
        Ok(head_direction_from_pose(poses.frame(id)))
    }

    /// True iff two spheres on different, non-adjacent joints overlap.
    pub fn check_self_collision(&self, q: &[f64]) -> Result<bool, ChainError> {
        let poses = self.forward_kinematics(q)?;
        Ok(self.collides(&poses))
    }

    pub fn collides(&self, poses: &Poses) -> bool {
        let centers: Vec<Vec3> = self
            .spheres
            .iter()
            .map(|s| poses.joints[s.joint].transform_point(&s.center))
            .collect();
        for a in 0..self.spheres.len() {
            for b in (a + 1)..self.spheres.len() {
                let (sa, sb) = (&self.spheres[a], &self.spheres[b]);
                if sa.joint == sb.joint || self.adjacent(sa.joint, sb.joint) {
                    continue;
                }
                if (centers[a] - centers[b]).norm() < sa.radius + sb.radius {
                    return true;
                }
            }
        }
        false
    }
}

pub fn head_direction_from_pose(head: &RigidTransform) -> Vec3 {
    head.transform_vector(&Vec3::x()).normalize()
}

// ---------------------------------------------------------------------------
// Configuration document
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct JointConfig {
    pub name: String,
    /// Name of the parent joint; omitted for joints attached to the base.
    #[serde(default)]
    pub parent: Option<String>,
    #[serde(default)]
    pub xyz: [f64; 3],
    #[serde(default)]
    pub rpy: [f64; 3],
    pub axis: [f64; 3],
    pub limits: [f64; 2],
    pub velocity_limit: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EndEffectorConfig {
    pub joint: String,
    #[serde(default)]
    pub xyz: [f64; 3],
    #[serde(default)]
    pub rpy: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SphereConfig {
    pub joint: String,
    pub center: [f64; 3],
    pub radius: f64,
}

/// Serialized form of a chain (`[chain]` table of the config document).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub joints: Vec<JointConfig>,
    #[serde(default)]
    pub end_effectors: BTreeMap<String, EndEffectorConfig>,
    #[serde(default)]
    pub collision_spheres: Vec<SphereConfig>,
}

const DEFAULT_CHAIN: &str = include_str!("../config/pepper_like_chain.toml");

impl ChainConfig {
    pub fn from_toml(text: &str) -> Result<Self, ChainError> {
        toml::from_str(text).map_err(|e| ChainError::Parse(e.to_string()))
    }

    /// The shipped pepper-like arm + head chain.
    pub fn pepper_like() -> Self {
        Self::from_toml(DEFAULT_CHAIN).expect("bundled chain config parses")
    }
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self::pepper_like()
    }
}

fn finite(values: &[f64], what: impl FnOnce() -> String) -> Result<(), ChainError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ChainError::NonFinite { what: what() })
    }
}

pub fn load_chain(config: &ChainConfig) -> Result<KinematicChain, ChainError> {
    if config.joints.is_empty() {
        return Err(ChainError::Empty);
    }
    let mut joints: Vec<Joint> = Vec::with_capacity(config.joints.len());
    let mut ancestors: Vec<Vec<bool>> = Vec::with_capacity(config.joints.len());
    let n = config.joints.len();
    for jc in &config.joints {
        if joints.iter().any(|j| j.name == jc.name) {
            return Err(ChainError::DuplicateName(jc.name.clone()));
        }
        finite(&jc.xyz, || format!("joint `{}` offset", jc.name))?;
        finite(&jc.rpy, || format!("joint `{}` offset", jc.name))?;
        finite(&jc.axis, || format!("joint `{}` axis", jc.name))?;
        finite(&jc.limits, || format!("joint `{}` limits", jc.name))?;
        let axis = Vec3::from(jc.axis);
        if (axis.norm() - 1.0).abs() > GEOMETRY_TOL {
            return Err(ChainError::NonUnitAxis {
                joint: jc.name.clone(),
                axis: jc.axis,
            });
        }
        let [lo, hi] = jc.limits;
        if lo >= hi {
            return Err(ChainError::InvalidLimits {
                joint: jc.name.clone(),
                lo,
                hi,
            });
        }
        if !(jc.velocity_limit > 0.0 && jc.velocity_limit.is_finite()) {
            return Err(ChainError::InvalidVelocityLimit {
                joint: jc.name.clone(),
                limit: jc.velocity_limit,
            });
        }
        let parent = match &jc.parent {
            None => None,
            Some(p) => Some(joints.iter().position(|j| &j.name == p).ok_or_else(|| {
                ChainError::DanglingParent {
                    child: jc.name.clone(),
                    parent: p.clone(),
                }
            })?),
        };
        let own = joints.len();
        let mut mask = match parent {
            Some(p) => ancestors[p].clone(),
            None => vec![false; n],
        };
        mask[own] = true;
        ancestors.push(mask);
        joints.push(Joint {
            name: jc.name.clone(),
            parent,
            offset: RigidTransform::from_xyz_rpy(jc.xyz, jc.rpy),
            // Axis is already unit within tolerance; renormalize to full precision.
            axis: Unit::new_normalize(axis),
            limits: (lo, hi),
            velocity_limit: jc.velocity_limit,
        });
    }

    let joint_by_name = |owner: &str, name: &str| {
        joints
            .iter()
            .position(|j| j.name == name)
            .ok_or_else(|| ChainError::DanglingParent {
                child: owner.to_string(),
                parent: name.to_string(),
            })
    };

    let mut end_effectors = Vec::with_capacity(config.end_effectors.len());
    for (name, ec) in &config.end_effectors {
        if joints.iter().any(|j| &j.name == name) {
            return Err(ChainError::DuplicateName(name.clone()));
        }
        finite(&ec.xyz, || format!("end effector `{name}` offset"))?;
        finite(&ec.rpy, || format!("end effector `{name}` offset"))?;
        end_effectors.push(EndEffector {
            name: name.clone(),
            joint: joint_by_name(name, &ec.joint)?,
            offset: RigidTransform::from_xyz_rpy(ec.xyz, ec.rpy),
        });
    }

    let mut spheres = Vec::with_capacity(config.collision_spheres.len());
    for (index, sc) in config.collision_spheres.iter().enumerate() {
        finite(&sc.center, || format!("collision sphere {index}"))?;
        if !(sc.radius > 0.0 && sc.radius.is_finite()) {
            return Err(ChainError::InvalidSphere {
                index,
                radius: sc.radius,
            });
        }
        spheres.push(CollisionSphere {
            joint: joint_by_name(&format!("collision sphere {index}"), &sc.joint)?,
            center: Vec3::from(sc.center),
            radius: sc.radius,
        });
    }

    Ok(KinematicChain {
        joints,
        end_effectors,
        spheres,
        ancestors,
    })
}

pub fn load_chain_str(text: &str) -> Result<KinematicChain, ChainError> {
    load_chain(&ChainConfig::from_toml(text)?)
}

/// The default six-joint chain: hip pitch, right shoulder pitch/roll, right
/// elbow, head yaw/pitch.
pub fn pepper_like_chain() -> KinematicChain {
    load_chain(&ChainConfig::pepper_like()).expect("bundled chain config is valid")
}


#[cfg(test)]
mod tests {
    use super::fixtures::PLANAR_2LINK;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn planar() -> KinematicChain {
        load_chain_str(PLANAR_2LINK).unwrap()
    }

    fn random_q(chain: &KinematicChain, rng: &mut impl Rng) -> Vec<f64> {
        chain
            .joints()
            .iter()
            .map(|j| rng.random_range(j.lower()..=j.upper()))
            .collect()
    }

    fn assert_vec(a: &Vec3, b: [f64; 3], tol: f64) {
        for i in 0..3 {
            assert!((a[i] - b[i]).abs() < tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn default_chain_has_six_joints_and_named_frames() {
        let chain = pepper_like_chain();
        assert_eq!(chain.dof(), 6);
        let names: Vec<_> = chain.joints().iter().map(|j| j.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "hip_pitch",
                "r_shoulder_pitch",
                "r_shoulder_roll",
                "r_elbow",
                "head_yaw",
                "head_pitch"
            ]
        );
        assert!(chain.frame_id(RIGHT_HAND).is_ok());
        assert!(chain.frame_id(HEAD).is_ok());
        for (i, j) in chain.joints().iter().enumerate() {
            assert!(j.lower() < j.upper());
            assert!((j.axis.norm() - 1.0).abs() < GEOMETRY_TOL);
            if let Some(p) = j.parent {
                assert!(p < i);
            }
        }
    }

    #[test]
    fn planar_chain_loads() {
        let chain = planar();
        assert_eq!(chain.dof(), 2);
        assert_eq!(chain.frame_id("tip").unwrap(), FrameId::Effector(0));
    }

    #[test]
    fn rejects_equal_limits() {
        let text = PLANAR_2LINK.replacen("[-3.14159, 3.14159]", "[0.5, 0.5]", 1);
        assert!(matches!(
            load_chain_str(&text),
            Err(ChainError::InvalidLimits { .. })
        ));
    }

    #[test]
    fn rejects_non_unit_axis() {
        let text = PLANAR_2LINK.replacen("[0.0, 0.0, 1.0]", "[0.0, 0.0, 2.0]", 1);
        assert!(matches!(
            load_chain_str(&text),
            Err(ChainError::NonUnitAxis { .. })
        ));
    }

    #[test]
    fn rejects_dangling_parent() {
        let text = PLANAR_2LINK.replace("parent = \"shoulder\"", "parent = \"wrist\"");
        let err = load_chain_str(&text).unwrap_err();
        assert!(matches!(err, ChainError::DanglingParent { .. }));
        assert!(err.to_string().contains("wrist"));
    }

    #[test]
    fn rejects_malformed_document() {
        assert!(matches!(
            load_chain_str("joints = 3"),
            Err(ChainError::Parse(_))
        ));
        let missing_axis = PLANAR_2LINK.replacen("axis = [0.0, 0.0, 1.0]\n", "", 1);
        assert!(matches!(
            load_chain_str(&missing_axis),
            Err(ChainError::Parse(_))
        ));
    }

    #[test]
    fn planar_forward_kinematics() {
        let chain = planar();
        let tip = |q: [f64; 2]| chain.frame_position(&q, "tip").unwrap();
        assert_vec(&tip([0.0, 0.0]), [2.0, 0.0, 0.0], 1e-12);
        assert_vec(&tip([FRAC_PI_2, 0.0]), [0.0, 2.0, 0.0], 1e-12);
        assert_vec(&tip([FRAC_PI_2, -FRAC_PI_2]), [1.0, 1.0, 0.0], 1e-12);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let chain = planar();
        assert_eq!(
            chain.forward_kinematics(&[0.0]).unwrap_err(),
            ChainError::LengthMismatch {
                expected: 2,
                got: 1
            }
        );
    }

    #[test]
    fn frame_map_contains_joints_and_effectors() {
        let chain = pepper_like_chain();
        let map = chain.frame_poses(&[0.0; 6]).unwrap();
        assert_eq!(map.len(), 8);
        assert!(map.contains_key("right_hand"));
        assert!(map.contains_key("hip_pitch"));
    }

    #[test]
    fn default_chain_home_hand_position() {
        // Composition of the bundled offsets at q = 0:
        // hip (0,0,0.60) + shoulder (0,-0.15,0.36) + upper arm 0.18 + forearm/hand 0.22.
        let chain = pepper_like_chain();
        let hand = chain.frame_position(&[0.0; 6], RIGHT_HAND).unwrap();
        assert_vec(&hand, [0.40, -0.15, 0.96], 1e-12);
        let head = chain.frame_position(&[0.0; 6], HEAD).unwrap();
        assert_vec(&head, [0.05, 0.0, 1.10], 1e-12);
    }

    #[test]
    fn planar_jacobian_at_zero() {
        let chain = planar();
        let jac = chain.jacobian(&[0.0, 0.0], "tip").unwrap();
        assert_vec(&jac.column(0).into(), [0.0, 2.0, 0.0], 1e-12);
        assert_vec(&jac.column(1).into(), [0.0, 1.0, 0.0], 1e-12);
    }

    #[test]
    fn unknown_frame_is_rejected() {
        let chain = planar();
        assert_eq!(
            chain.jacobian(&[0.0, 0.0], "nose").unwrap_err(),
            ChainError::UnknownFrame("nose".into())
        );
    }

    #[test]
    fn head_jacobian_ignores_arm_joints() {
        let chain = pepper_like_chain();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let q = random_q(&chain, &mut rng);
            let jac = chain.jacobian(&q, HEAD).unwrap();
            for k in 1..=3 {
                assert_eq!(jac.column(k).norm(), 0.0);
            }
        }
    }

    /// Central finite differences of the frame position, independent of the
    /// cross-product construction used by `jacobian`.
    fn fd_jacobian(chain: &KinematicChain, q: &[f64], frame: &str, h: f64) -> Matrix3xX<f64> {
        let mut jac = Matrix3xX::zeros(q.len());
        for k in 0..q.len() {
            let mut plus = q.to_vec();
            let mut minus = q.to_vec();
            plus[k] += h;
            minus[k] -= h;
            let col = (chain.frame_position(&plus, frame).unwrap()
                - chain.frame_position(&minus, frame).unwrap())
                / (2.0 * h);
            jac.set_column(k, &col);
        }
        jac
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let chain = pepper_like_chain();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let q = random_q(&chain, &mut rng);
            for frame in [RIGHT_HAND, HEAD] {
                let analytic = chain.jacobian(&q, frame).unwrap();
                let numeric = fd_jacobian(&chain, &q, frame, 1e-6);
                let rel = (&analytic - &numeric).norm() / analytic.norm().max(1e-12);
                assert!(rel < 1e-5, "relative error {rel}");
            }
        }
    }

    #[test]
    fn head_direction_conventions() {
        let chain = pepper_like_chain();
        assert_vec(
            &chain.head_direction(&[0.0; 6]).unwrap(),
            [1.0, 0.0, 0.0],
            1e-12,
        );
        let mut q = [0.0; 6];
        q[4] = FRAC_PI_2;
        assert_vec(&chain.head_direction(&q).unwrap(), [0.0, 1.0, 0.0], 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let q = random_q(&chain, &mut rng);
            let d = chain.head_direction(&q).unwrap();
            assert!((d.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn transform_point_basics() {
        let p = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(RigidTransform::identity().transform_point(&p), p);
        let t = RigidTransform::from_translation(Vec3::new(0.0, 0.0, 0.5));
        assert_eq!(t.transform_point(&Vec3::zeros()), Vec3::new(0.0, 0.0, 0.5));
    }

    #[test]
    fn rigid_transform_rejects_bad_rotation() {
        let scaled = Matrix3::identity() * 2.0;
        assert_eq!(
            RigidTransform::new(scaled, Vec3::zeros()).unwrap_err(),
            ChainError::InvalidRotation
        );
        let reflection = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(RigidTransform::new(reflection, Vec3::zeros()).is_err());
    }

    #[test]
    fn default_chain_home_is_collision_free() {
        let chain = pepper_like_chain();
        assert!(!chain.check_self_collision(&[0.0; 6]).unwrap());
    }

    #[test]
    fn concentric_spheres_collide_unless_adjacent() {
        let base = |joint_b: &str| {
            format!(
                "{PLANAR_2LINK}
[[joints]]
name = \"wrist\"
parent = \"elbow\"
xyz = [1.0, 0.0, 0.0]
axis = [0.0, 0.0, 1.0]
limits = [-1.0, 1.0]
velocity_limit = 1.0

[[collision_spheres]]
joint = \"shoulder\"
center = [0.0, 0.0, 0.0]
radius = 0.1

[[collision_spheres]]
joint = \"{joint_b}\"
center = [0.0, 0.0, 0.0]
radius = 0.1
"
            )
        };
        // The wrist sits 2 m away along x at q = 0; fold it back onto the base.
        let folded = [0.0, std::f64::consts::PI - 1e-9, 0.0];
        let chain = load_chain_str(&base("wrist")).unwrap();
        let far = chain.check_self_collision(&[0.0; 3]).unwrap();
        assert!(!far);
        let poses = chain.forward_kinematics(&folded).unwrap();
        assert!(poses.joints[2].translation().norm() < 1e-6);
        assert!(chain.check_self_collision(&folded).unwrap());

        // Parent/child pairs never count, even when concentric.
        let adjacent = base("shoulder").replace(
            "joint = \"shoulder\"\ncenter = [0.0, 0.0, 0.0]\nradius = 0.1\n\n[[collision_spheres]]\njoint = \"shoulder\"",
            "joint = \"shoulder\"\ncenter = [0.0, 0.0, 0.0]\nradius = 0.1\n\n[[collision_spheres]]\njoint = \"elbow\"\ncenter = [-1.0, 0.0, 0.0]\nradius = 0.1\n\n[[collision_spheres]]\njoint = \"shoulder\"",
        );
        let chain = load_chain_str(&adjacent).unwrap();
        assert!(!chain.check_self_collision(&[0.0; 3]).unwrap());
    }
}
