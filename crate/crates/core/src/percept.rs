//! Depth-based target estimation from supplied detection boxes: size
//! filtering, seeded depth sampling, pinhole back-projection, the move to the
//! robot base frame and a distance gate on re-publication.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma};
use nalgebra::Matrix3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{RigidTransform, Vec3};
use crate::io::write_atomic;

/// Boxes shorter than this fraction of the image height are discarded.
pub const MIN_HEIGHT_FRACTION: f64 = 0.1;
/// Boxes taller than this fraction of the image height are discarded.
pub const MAX_HEIGHT_FRACTION: f64 = 0.8;
pub const DEFAULT_SAMPLES: usize = 10;
/// A new estimate is published only if it moved more than this, metres.
pub const PUBLISH_THRESHOLD: f64 = 0.2;

#[derive(Debug, Error)]
pub enum PerceptError {
    #[error("invalid intrinsics: {0}")]
    Intrinsics(String),
    #[error("invalid detection box: {0}")]
    Box(String),
    #[error("depth image is {got_w}x{got_h}, camera expects {want_w}x{want_h}")]
    DepthSize {
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error("{path}: {msg}")]
    Depth { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("detections line {line}: {msg}")]
    Detections { line: u64, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraIntrinsics {
    /// A 640x480 depth stream with a roughly 80° horizontal field of view.
    fn default() -> Self {
        Self {
            fx: 385.0,
            fy: 385.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), PerceptError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && (0.0..self.width as f64).contains(&self.cx)
            && (0.0..self.height as f64).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(PerceptError::Intrinsics(format!("{self:?}")))
        }
    }

    /// Camera-frame point at pixel `(u, v)` and depth `z`.
    pub fn back_project(&self, u: f64, v: f64, z: f64) -> Vec3 {
        Vec3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    pub fn project(&self, p: &Vec3) -> (f64, f64) {
        (self.cx + self.fx * p.x / p.z, self.cy + self.fy * p.y / p.z)
    }
}

/// Camera intrinsics plus the fixed mount pose relative to the head frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub intrinsics: CameraIntrinsics,
    pub mount_xyz: [f64; 3],
    pub mount_rpy: [f64; 3],
    pub samples: usize,
    pub publish_threshold: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics::default(),
            mount_xyz: [0.0; 3],
            mount_rpy: [0.0; 3],
            samples: DEFAULT_SAMPLES,
            publish_threshold: PUBLISH_THRESHOLD,
        }
    }
}

impl CameraConfig {
    pub fn mount(&self) -> RigidTransform {
        RigidTransform::from_xyz_rpy(self.mount_xyz, self.mount_rpy)
    }

    pub fn validate(&self) -> Result<(), PerceptError> {
        self.intrinsics.validate()?;
        if self.samples == 0 || !(self.publish_threshold >= 0.0) {
            return Err(PerceptError::Intrinsics(
                "samples must be positive and publish_threshold non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectionClass {
    Hand,
    Arm,
}

impl DetectionClass {
    pub fn as_str(self) -> &'static str {
        match self {
            DetectionClass::Hand => "hand",
            DetectionClass::Arm => "arm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub class: DetectionClass,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub confidence: f64,
}

impl DetectionBox {
    pub fn validate(&self, width: u32, height: u32) -> Result<(), PerceptError> {
        let inside = self.x_min >= 0.0
            && self.y_min >= 0.0
            && self.x_max <= width as f64
            && self.y_max <= height as f64;
        if !(self.x_min < self.x_max && self.y_min < self.y_max) || !inside {
            return Err(PerceptError::Box(format!(
                "{self:?} in a {width}x{height} image"
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(PerceptError::Box(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscardReason {
    TooSmall,
    TooBig,
}

/// Keeps boxes whose height is within `[0.1, 0.8]` of the image height.
pub fn filter_detection(b: &DetectionBox, image_height: u32) -> Result<(), DiscardReason> {
    let fraction = b.height() / image_height as f64;
    if fraction < MIN_HEIGHT_FRACTION {
        Err(DiscardReason::TooSmall)
    } else if fraction > MAX_HEIGHT_FRACTION {
        Err(DiscardReason::TooBig)
    } else {
        Ok(())
    }
}

/// The box to track among one frame's detections: size-filtered, hands
/// before arms, then highest confidence, then earliest in the list.
pub fn select_detection(boxes: &[DetectionBox], image_height: u32) -> Option<&DetectionBox> {
    boxes
        .iter()
        .filter(|b| filter_detection(b, image_height).is_ok())
        .min_by(|a, b| {
            a.class
                .cmp(&b.class)
                .then(b.confidence.total_cmp(&a.confidence))
        })
}

/// Row-major 16-bit depth in millimetres; zero marks an invalid pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u16>,
}

impl DepthImage {
    pub fn constant(width: u32, height: u32, mm: u16) -> Self {
        Self {
            width,
            height,
            data: vec![mm; (width * height) as usize],
        }
    }

    pub fn get(&self, u: u32, v: u32) -> u16 {
        self.data[(v * self.width + u) as usize]
    }

    pub fn set(&mut self, u: u32, v: u32, mm: u16) {
        self.data[(v * self.width + u) as usize] = mm;
    }

    /// Decodes a 16-bit PGM.
    pub fn from_pgm_bytes(bytes: &[u8]) -> Result<Self, String> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Pnm)
            .map_err(|e| e.to_string())?;
        match img {
            DynamicImage::ImageLuma16(buf) => Ok(Self {
                width: buf.width(),
                height: buf.height(),
                data: buf.into_raw(),
            }),
            other => Err(format!(
                "expected a 16-bit grayscale PGM, got {:?}",
                other.color()
            )),
        }
    }

    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width, self.height, self.data.clone())
                .expect("data matches dimensions");
        let mut out = Cursor::new(Vec::new());
        DynamicImage::ImageLuma16(buf)
            .write_to(&mut out, ImageFormat::Pnm)
            .expect("in-memory PGM encoding");
        out.into_inner()
    }

    pub fn load_pgm(path: &Path) -> Result<Self, PerceptError> {
        let bytes = std::fs::read(path).map_err(|source| PerceptError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_pgm_bytes(&bytes).map_err(|msg| PerceptError::Depth {
            path: path.to_path_buf(),
            msg,
        })
    }

    pub fn save_pgm(&self, path: &Path) -> Result<(), PerceptError> {
        write_atomic(path, &self.to_pgm_bytes()).map_err(|source| PerceptError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Camera-frame estimate with the pixels whose depths were averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraEstimate {
    pub point: Vec3,
    pub samples: Vec<(u32, u32)>,
}

/// Averages the depth of up to `n` valid pixels drawn uniformly from the
/// central third of the box (at most `10 n` draws) and back-projects the box
/// center at that depth. Returns `None` when every draw hit an invalid pixel.
pub fn estimate_target<R: Rng + ?Sized>(
    depth: &DepthImage,
    b: &DetectionBox,
    intrinsics: &CameraIntrinsics,
    rng: &mut R,
    n: usize,
) -> Result<Option<CameraEstimate>, PerceptError> {
    if depth.width != intrinsics.width || depth.height != intrinsics.height {
        return Err(PerceptError::DepthSize {
            got_w: depth.width,
            got_h: depth.height,
            want_w: intrinsics.width,
            want_h: intrinsics.height,
        });
    }
    b.validate(depth.width, depth.height)?;
    let (w, h) = (b.x_max - b.x_min, b.y_max - b.y_min);
    let (u0, u1) = (b.x_min + w / 3.0, b.x_min + 2.0 * w / 3.0);
    let (v0, v1) = (b.y_min + h / 3.0, b.y_min + 2.0 * h / 3.0);
    let pixel = |x: f64, size: u32| (x.floor().max(0.0) as u32).min(size - 1);

    let mut samples = Vec::with_capacity(n);
    let mut sum_mm = 0.0;
    for _ in 0..10 * n {
        if samples.len() == n {
            break;
        }
        let u = pixel(rng.random_range(u0..u1), depth.width);
        let v = pixel(rng.random_range(v0..v1), depth.height);
        let mm = depth.get(u, v);
        if mm != 0 {
            sum_mm += f64::from(mm);
            samples.push((u, v));
        }
    }
    if samples.is_empty() {
        return Ok(None);
    }
    let z = sum_mm / samples.len() as f64 / 1000.0;
    let (cu, cv) = b.center();
    Ok(Some(CameraEstimate {
        point: intrinsics.back_project(cu, cv, z),
        samples,
    }))
}

/// Optical axes (x right, y down, z forward) expressed in the body
/// convention (x forward, y left, z up).
pub fn optical_to_body() -> Matrix3<f64> {
    Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0)
}

/// Maps an optical-frame point through `camera_pose` (camera body frame in
/// the robot base frame).
pub fn to_base_frame(point_cam: &Vec3, camera_pose: &RigidTransform) -> Vec3 {
    camera_pose.transform_point(&(optical_to_body() * point_cam))
}

pub fn from_base_frame(point_base: &Vec3, camera_pose: &RigidTransform) -> Vec3 {
    optical_to_body().transpose() * camera_pose.inverse().transform_point(point_base)
}

pub fn should_publish(candidate: &Vec3, last_published: Option<&Vec3>, threshold: f64) -> bool {
    last_published.is_none_or(|last| (candidate - last).norm() > threshold)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetEstimate {
    pub point_base: Vec3,
    pub source_class: DetectionClass,
    pub frame_id: u64,
    pub timestamp: f64,
}

/// One frame's detections as read from a detections file.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionFrame {
    pub frame_id: u64,
    pub boxes: Vec<DetectionBox>,
}

#[derive(Debug, Deserialize)]
struct DetectionRow {
    frame_id: u64,
    class: DetectionClass,
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    confidence: f64,
}

/// Parses `frame_id,class,x_min,y_min,x_max,y_max,confidence` lines
/// (no header, `#` starts a comment line) grouped by frame in ascending order.
pub fn parse_detections(text: &str) -> Result<Vec<DetectionFrame>, PerceptError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut frames: std::collections::BTreeMap<u64, Vec<DetectionBox>> = Default::default();
    for row in reader.deserialize::<DetectionRow>() {
        let row = row.map_err(|e| PerceptError::Detections {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        frames.entry(row.frame_id).or_default().push(DetectionBox {
            class: row.class,
            x_min: row.x_min,
            y_min: row.y_min,
            x_max: row.x_max,
            y_max: row.y_max,
            confidence: row.confidence,
        });
    }
    Ok(frames
        .into_iter()
        .map(|(frame_id, boxes)| DetectionFrame { frame_id, boxes })
        .collect())
}

pub fn load_detections(path: &Path) -> Result<Vec<DetectionFrame>, PerceptError> {
    let text = std::fs::read_to_string(path).map_err(|source| PerceptError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_detections(&text)
}

/// What happened to one frame.
#[derive(Debug, Clone, PartialEq)]
pub enum FrameOutcome {
    NoDetection,
    NoValidDepth,
    /// An estimate within the publish threshold of the last published point.
    Suppressed(TargetEstimate),
    Published(TargetEstimate),
}

/// Stateful per-camera pipeline; remembers the last published point.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: CameraConfig,
    last_published: Option<Vec3>,
}

impl Pipeline {
    pub fn new(config: CameraConfig) -> Result<Self, PerceptError> {
        config.validate()?;
        Ok(Self {
            config,
            last_published: None,
        })
    }

    pub fn last_published(&self) -> Option<&Vec3> {
        self.last_published.as_ref()
    }

    /// `head_pose` is the head frame in the base frame; the camera sits at the
    /// configured mount offset from it.
    pub fn process<R: Rng + ?Sized>(
        &mut self,
        frame_id: u64,
        timestamp: f64,
        boxes: &[DetectionBox],
        depth: &DepthImage,
        head_pose: &RigidTransform,
        rng: &mut R,
    ) -> Result<FrameOutcome, PerceptError> {
        let intr = &self.config.intrinsics;
        for b in boxes {
            b.validate(intr.width, intr.height)?;
        }
        let Some(chosen) = select_detection(boxes, intr.height) else {
            return Ok(FrameOutcome::NoDetection);
        };
        let Some(est) = estimate_target(depth, chosen, intr, rng, self.config.samples)? else {
            return Ok(FrameOutcome::NoValidDepth);
        };
        let camera_pose = head_pose.compose(&self.config.mount());
        let target = TargetEstimate {
            point_base: to_base_frame(&est.point, &camera_pose),
            source_class: chosen.class,
            frame_id,
            timestamp,
        };
        if should_publish(
            &target.point_base,
            self.last_published.as_ref(),
            self.config.publish_threshold,
        ) {
            self.last_published = Some(target.point_base);
            Ok(FrameOutcome::Published(target))
        } else {
            Ok(FrameOutcome::Suppressed(target))
        }
    }
}

/// `frame_id,timestamp,class,x,y,z` with a header line.
pub fn targets_to_csv(targets: &[TargetEstimate]) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["frame_id", "timestamp", "class", "x", "y", "z"])?;
    for t in targets {
        w.write_record([
            t.frame_id.to_string(),
            t.timestamp.to_string(),
            t.source_class.as_str().to_string(),
            t.point_base.x.to_string(),
            t.point_base.y.to_string(),
            t.point_base.z.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Unit, Vector3};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::default()
    }

    fn boxed(class: DetectionClass, cu: f64, cv: f64, w: f64, h: f64) -> DetectionBox {
        DetectionBox {
            class,
            x_min: cu - w / 2.0,
            y_min: cv - h / 2.0,
            x_max: cu + w / 2.0,
            y_max: cv + h / 2.0,
            confidence: 0.9,
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    #[test]
    fn size_filter_on_height_fraction() {
        let h = 480.0;
        let frac = |f: f64| boxed(DetectionClass::Hand, 320.0, 240.0, 60.0, f * h);
        assert_eq!(
            filter_detection(&frac(0.05), 480),
            Err(DiscardReason::TooSmall)
        );
        assert_eq!(filter_detection(&frac(0.5), 480), Ok(()));
        assert_eq!(
            filter_detection(&frac(0.9), 480),
            Err(DiscardReason::TooBig)
        );
        assert_eq!(filter_detection(&frac(0.1), 480), Ok(()));
        assert_eq!(filter_detection(&frac(0.8), 480), Ok(()));
    }

    #[test]
    fn hands_win_over_arms() {
        let mut arm = boxed(DetectionClass::Arm, 200.0, 240.0, 80.0, 200.0);
        arm.confidence = 0.99;
        let mut hand = boxed(DetectionClass::Hand, 400.0, 240.0, 50.0, 100.0);
        hand.confidence = 0.3;
        let tiny_hand = boxed(DetectionClass::Hand, 100.0, 100.0, 10.0, 10.0);
        assert_eq!(select_detection(&[arm, hand], 480), Some(&hand));
        assert_eq!(select_detection(&[arm, tiny_hand], 480), Some(&arm));
        assert_eq!(select_detection(&[tiny_hand], 480), None);
    }

    #[test]
    fn principal_point_back_projects_onto_axis() {
        let d = DepthImage::constant(640, 480, 500);
        let b = boxed(DetectionClass::Hand, 320.0, 240.0, 60.0, 120.0);
        let est = estimate_target(&d, &b, &intr(), &mut rng(), 10)
            .unwrap()
            .unwrap();
        assert_eq!(est.point, Vec3::new(0.0, 0.0, 0.5));
        assert_eq!(est.samples.len(), 10);
    }

    #[test]
    fn one_focal_length_off_axis() {
        let i = intr();
        let d = DepthImage::constant(640, 480, 1000);
        let b = boxed(DetectionClass::Hand, i.cx + i.fx / 2.0, i.cy, 40.0, 120.0);
        let est = estimate_target(&d, &b, &i, &mut rng(), 10)
            .unwrap()
            .unwrap();
        assert!((est.point - Vec3::new(0.5, 0.0, 1.0)).norm() < 1e-12);

        let wide = CameraIntrinsics { fx: 100.0, ..i };
        let b = boxed(
            DetectionClass::Hand,
            wide.cx + wide.fx,
            wide.cy,
            40.0,
            120.0,
        );
        let est = estimate_target(&d, &b, &wide, &mut rng(), 10)
            .unwrap()
            .unwrap();
        assert!((est.point - Vec3::new(1.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn samples_stay_in_central_third() {
        let d = DepthImage::constant(640, 480, 700);
        let b = boxed(DetectionClass::Arm, 300.0, 200.0, 90.0, 150.0);
        let est = estimate_target(&d, &b, &intr(), &mut rng(), 200)
            .unwrap()
            .unwrap();
        for (u, v) in est.samples {
            assert!((285..315).contains(&u), "u {u}");
            assert!((175..225).contains(&v), "v {v}");
        }
    }

    #[test]
    fn mixed_depth_mean_follows_drawn_pixels() {
        let mut d = DepthImage::constant(640, 480, 0);
        for v in 0..480 {
            for u in 0..640 {
                d.set(u, v, if u < 320 { 400 } else { 600 });
            }
        }
        let b = boxed(DetectionClass::Hand, 320.0, 240.0, 90.0, 120.0);
        let est = estimate_target(&d, &b, &intr(), &mut rng(), 10)
            .unwrap()
            .unwrap();
        let mean_mm = est
            .samples
            .iter()
            .map(|&(u, v)| f64::from(d.get(u, v)))
            .sum::<f64>()
            / 10.0;
        assert!((est.point.z - mean_mm / 1000.0).abs() < 1e-12);
        assert!((0.4..=0.6).contains(&est.point.z));
        let again = estimate_target(&d, &b, &intr(), &mut rng(), 10)
            .unwrap()
            .unwrap();
        assert_eq!(est, again);
    }

    #[test]
    fn invalid_pixels_are_skipped() {
        let mut d = DepthImage::constant(640, 480, 800);
        for v in 0..480 {
            for u in (0..640).step_by(2) {
                d.set(u, v, 0);
            }
        }
        let b = boxed(DetectionClass::Hand, 320.0, 240.0, 90.0, 120.0);
        let est = estimate_target(&d, &b, &intr(), &mut rng(), 10)
            .unwrap()
            .unwrap();
        assert_eq!(est.samples.len(), 10);
        assert!(est.samples.iter().all(|&(u, _)| u % 2 == 1));
        assert_eq!(est.point.z, 0.8);

        let empty = DepthImage::constant(640, 480, 0);
        assert_eq!(
            estimate_target(&empty, &b, &intr(), &mut rng(), 10).unwrap(),
            None
        );
    }

    #[test]
    fn mismatched_depth_size_is_rejected() {
        let d = DepthImage::constant(320, 240, 500);
        let b = boxed(DetectionClass::Hand, 100.0, 100.0, 20.0, 60.0);
        assert!(matches!(
            estimate_target(&d, &b, &intr(), &mut rng(), 10),
            Err(PerceptError::DepthSize { .. })
        ));
    }

    #[test]
    fn optical_z_is_base_x() {
        let p = to_base_frame(&Vec3::new(0.0, 0.0, 0.5), &RigidTransform::identity());
        assert_eq!(p, Vec3::new(0.5, 0.0, 0.0));
        let right_down = to_base_frame(&Vec3::new(1.0, 1.0, 0.0), &RigidTransform::identity());
        assert_eq!(right_down, Vec3::new(0.0, -1.0, -1.0));
        assert!((optical_to_body().determinant() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn head_yaw_rotates_bearing() {
        let yaw = RigidTransform::from_axis_angle(
            &Unit::new_normalize(Vector3::z()),
            std::f64::consts::FRAC_PI_2,
        );
        let p = to_base_frame(&Vec3::new(0.0, 0.0, 2.0), &yaw);
        assert!((p - Vec3::new(0.0, 2.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn publish_gate() {
        let last = Vec3::new(0.7, 0.0, 0.7);
        assert!(should_publish(&last, None, 0.2));
        assert!(!should_publish(
            &(last + Vec3::new(0.1, 0.0, 0.0)),
            Some(&last),
            0.2
        ));
        assert!(should_publish(
            &(last + Vec3::new(0.0, 0.3, 0.0)),
            Some(&last),
            0.2
        ));
    }

    #[test]
    fn pipeline_gates_a_scripted_sequence() {
        let mut p = Pipeline::new(CameraConfig::default()).unwrap();
        let pose = RigidTransform::identity();
        let d = DepthImage::constant(640, 480, 1000);
        let hand = |cu: f64| boxed(DetectionClass::Hand, cu, 240.0, 40.0, 120.0);
        let mut r = rng();
        let mut step = |p: &mut Pipeline, boxes: &[DetectionBox], f: u64| {
            p.process(f, f as f64 / 50.0, boxes, &d, &pose, &mut r)
                .unwrap()
        };

        assert_eq!(step(&mut p, &[], 0), FrameOutcome::NoDetection);
        assert!(matches!(
            step(&mut p, &[hand(320.0)], 1),
            FrameOutcome::Published(_)
        ));
        // 0.1 m sideways at 1 m depth is 38.5 px.
        assert!(matches!(
            step(&mut p, &[hand(358.5)], 2),
            FrameOutcome::Suppressed(_)
        ));
        let FrameOutcome::Published(t) = step(&mut p, &[hand(320.0 + 0.3 * 385.0)], 3) else {
            panic!("expected a publication");
        };
        assert!((t.point_base - Vec3::new(1.0, -0.3, 0.0)).norm() < 1e-12);
        assert_eq!(t.frame_id, 3);
        let too_big = boxed(DetectionClass::Hand, 320.0, 240.0, 40.0, 470.0);
        assert_eq!(step(&mut p, &[too_big], 4), FrameOutcome::NoDetection);
        assert_eq!(p.last_published(), Some(&t.point_base));
    }

    #[test]
    fn pgm_round_trip() {
        let mut d = DepthImage::constant(7, 5, 1234);
        d.set(3, 2, 65535);
        d.set(0, 4, 0);
        let back = DepthImage::from_pgm_bytes(&d.to_pgm_bytes()).unwrap();
        assert_eq!(back, d);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pgm");
        d.save_pgm(&path).unwrap();
        assert_eq!(DepthImage::load_pgm(&path).unwrap(), d);
        assert!(DepthImage::from_pgm_bytes(b"P5\n2 2\n255\n\x01\x02\x03\x04").is_err());
    }

    #[test]
    fn detections_file_groups_frames() {
        let text = "# frame,class,box,confidence\n\
                    2, hand, 10, 20, 50, 120, 0.8\n\
                    0, arm, 0, 0, 100, 200, 0.5\n\
                    2, arm, 5, 5, 60, 200, 0.4\n";
        let frames = parse_detections(text).unwrap();
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[0].frame_id, 0);
        assert_eq!(frames[1].boxes.len(), 2);
        assert_eq!(frames[1].boxes[0].class, DetectionClass::Hand);
        assert!(parse_detections("1, head, 0, 0, 1, 1, 0.5\n").is_err());
        assert!(parse_detections("1, hand, 0, 0\n").is_err());
    }

    #[test]
    fn target_csv_layout() {
        let t = TargetEstimate {
            point_base: Vec3::new(0.5, -0.25, 1.0),
            source_class: DetectionClass::Arm,
            frame_id: 4,
            timestamp: 0.08,
        };
        let text = String::from_utf8(targets_to_csv(&[t]).unwrap()).unwrap();
        assert_eq!(
            text,
            "frame_id,timestamp,class,x,y,z\n4,0.08,arm,0.5,-0.25,1\n"
        );
    }

    #[test]
    fn bad_boxes_and_intrinsics() {
        let mut b = boxed(DetectionClass::Hand, 320.0, 240.0, 40.0, 120.0);
        b.x_max = b.x_min;
        assert!(b.validate(640, 480).is_err());
        let outside = boxed(DetectionClass::Hand, 630.0, 240.0, 40.0, 120.0);
        assert!(outside.validate(640, 480).is_err());
        assert!(CameraIntrinsics { fx: 0.0, ..intr() }.validate().is_err());
        assert!(CameraIntrinsics {
            cx: 640.0,
            ..intr()
        }
        .validate()
        .is_err());
    }

    proptest! {
        #[test]
        fn projection_inverts_back_projection(u in 0.0..640.0f64, v in 0.0..480.0f64, z in 0.1..5.0f64) {
            let i = intr();
            let (pu, pv) = i.project(&i.back_project(u, v, z));
            prop_assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9);
        }

        #[test]
        fn base_frame_round_trip(
            x in -2.0..2.0f64, y in -2.0..2.0f64, z in 0.1..4.0f64,
            roll in -3.0..3.0f64, pitch in -1.5..1.5f64, yaw in -3.0..3.0f64,
            t in prop::array::uniform3(-1.0..1.0f64),
        ) {
            let pose = RigidTransform::from_xyz_rpy(t, [roll, pitch, yaw]);
            let p = Vec3::new(x, y, z);
            prop_assert!((from_base_frame(&to_base_frame(&p, &pose), &pose) - p).norm() < 1e-9);
        }

        #[test]
        fn constant_depth_is_seed_independent(seed in any::<u64>(), mm in 1u16..10_000) {
            let d = DepthImage::constant(640, 480, mm);
            let b = boxed(DetectionClass::Hand, 200.0, 300.0, 30.0, 90.0);
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let est = estimate_target(&d, &b, &intr(), &mut r, 10).unwrap().unwrap();
            prop_assert_eq!(est.point.z, f64::from(mm) / 1000.0);
        }
    }
}
