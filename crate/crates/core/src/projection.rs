//! Pinhole projection and the training losses built on it.

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::physics::{ContactSet, ForceSet, ObjectModel, RigidBodyState};
use crate::serde_util;

pub const DEFAULT_IMAGE_WIDTH: u32 = 1920;
pub const DEFAULT_IMAGE_HEIGHT: u32 = 1080;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProjectionError {
    #[error("point {index} has non-positive depth {depth}")]
    BehindCamera { index: usize, depth: f64 },
    #[error("no visible keypoints in frame {frame}")]
    NoVisibleKeypoints { frame: usize },
    #[error("observation has {observed} keypoints but the model defines {model}")]
    KeypointCountMismatch { observed: usize, model: usize },
    #[error("contact sets differ in size: {left} vs {right}")]
    ContactCountMismatch { left: usize, right: usize },
    #[error("force sequences differ in shape: {0}")]
    ForceShapeMismatch(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("frame {frame}: pixel {value:?} lies outside the {width}x{height} image")]
    PixelOutOfBounds { frame: usize, value: [f64; 2], width: u32, height: u32 },
}

impl ProjectionError {
    pub fn code(&self) -> &'static str {
        match self {
            ProjectionError::BehindCamera { .. } => "behind_camera",
            ProjectionError::NoVisibleKeypoints { .. } => "no_visible_keypoints",
            ProjectionError::KeypointCountMismatch { .. } => "keypoint_count_mismatch",
            ProjectionError::ContactCountMismatch { .. } => "contact_count_mismatch",
            ProjectionError::ForceShapeMismatch(_) => "force_shape_mismatch",
            ProjectionError::InvalidCamera(_) => "invalid_camera",
            ProjectionError::PixelOutOfBounds { .. } => "pixel_out_of_bounds",
        }
    }
}

/// Rigid transform taking object coordinates into the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    #[serde(with = "serde_util::unit_quat")]
    pub rotation: UnitQuaternion<f64>,
    #[serde(with = "serde_util::vec3")]
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(UnitQuaternion::identity(), Vector3::zeros())
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

impl From<&RigidBodyState> for Pose {
    fn from(s: &RigidBodyState) -> Self {
        Self::new(s.orientation, s.position)
    }
}

/// Static pinhole camera. `extrinsic` maps world coordinates into the camera
/// frame (z forward, x right, y down).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default = "default_width")]
    pub image_width: u32,
    #[serde(default = "default_height")]
    pub image_height: u32,
    pub extrinsic: Pose,
}

fn default_width() -> u32 {
    DEFAULT_IMAGE_WIDTH
}

fn default_height() -> u32 {
    DEFAULT_IMAGE_HEIGHT
}

impl Camera {
    /// Camera at the world origin with identity extrinsics.
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            image_width: DEFAULT_IMAGE_WIDTH,
            image_height: DEFAULT_IMAGE_HEIGHT,
            extrinsic: Pose::identity(),
        }
    }

    pub fn with_extrinsic(mut self, extrinsic: Pose) -> Self {
        self.extrinsic = extrinsic;
        self
    }

    pub fn validate(&self) -> Result<(), ProjectionError> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|x| x.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(ProjectionError::InvalidCamera(format!(
                "focal lengths must be positive and finite (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(ProjectionError::InvalidCamera("image size must be non-zero".into()));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.extrinsic.transform_point(p)
    }

    /// Projects a camera-frame point. Depth must be positive.
    pub fn project_camera_point(&self, pc: &Vector3<f64>) -> Option<Vector2<f64>> {
        if !(pc.z > 0.0) {
            return None;
        }
        Some(Vector2::new(self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy))
    }

    pub fn in_bounds(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0
            && px.y >= 0.0
            && px.x <= self.image_width as f64
            && px.y <= self.image_height as f64
    }

    /// Ray direction (camera frame, z = 1) through a pixel.
    pub fn back_project(&self, px: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0)
    }
}

/// Annotated pixels for one frame; `None` marks an occluded point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameObservation {
    pub t: usize,
    #[serde(with = "serde_util::opt_vec2_list")]
    pub keypoint_pixels: Vec<Option<Vector2<f64>>>,
    #[serde(default, with = "serde_util::opt_vec2_list")]
    pub contact_pixels: Vec<Option<Vector2<f64>>>,
}

impl FrameObservation {
    pub fn visible_keypoints(&self) -> impl Iterator<Item = (usize, &Vector2<f64>)> {
        self.keypoint_pixels.iter().enumerate().filter_map(|(i, p)| p.as_ref().map(|p| (i, p)))
    }

    pub fn visible_count(&self) -> usize {
        self.keypoint_pixels.iter().filter(|p| p.is_some()).count()
    }

    pub fn validate(&self, camera: &Camera) -> Result<(), ProjectionError> {
        for px in self.keypoint_pixels.iter().chain(&self.contact_pixels).flatten() {
            if !px.iter().all(|x| x.is_finite()) || !camera.in_bounds(px) {
                return Err(ProjectionError::PixelOutOfBounds {
                    frame: self.t,
                    value: [px.x, px.y],
                    width: camera.image_width,
                    height: camera.image_height,
                });
            }
        }
        Ok(())
    }
}

/// Projects object-frame points through an object pose and the camera.
pub fn project_points(
    points: &[Vector3<f64>],
    pose: &Pose,
    camera: &Camera,
) -> Result<Vec<Vector2<f64>>, ProjectionError> {
    points
        .iter()
        .enumerate()
        .map(|(index, p)| project_one(index, p, pose, camera))
        .collect()
}

pub(crate) fn project_one(
    index: usize,
    p: &Vector3<f64>,
    pose: &Pose,
    camera: &Camera,
) -> Result<Vector2<f64>, ProjectionError> {
    let pc = camera.world_to_camera(&pose.transform_point(p));
    camera
        .project_camera_point(&pc)
        .ok_or(ProjectionError::BehindCamera { index, depth: pc.z })
}

/// Sum of squared pixel distances over visible keypoints (px²).
pub fn keypoint_loss(
    obs: &FrameObservation,
    state: &RigidBodyState,
    model: &ObjectModel,
    camera: &Camera,
) -> Result<f64, ProjectionError> {
    check_keypoint_count(obs, model)?;
    let pose = Pose::from(state);
    let mut total = 0.0;
    let mut any = false;
    for (i, target) in obs.visible_keypoints() {
        let px = project_one(i, &model.keypoints[i].position, &pose, camera)?;
        total += (px - target).norm_squared();
        any = true;
    }
    if !any {
        return Err(ProjectionError::NoVisibleKeypoints { frame: obs.t });
    }
    Ok(total)
}

pub(crate) fn check_keypoint_count(
    obs: &FrameObservation,
    model: &ObjectModel,
) -> Result<(), ProjectionError> {
    if obs.keypoint_pixels.len() != model.keypoints.len() {
        return Err(ProjectionError::KeypointCountMismatch {
            observed: obs.keypoint_pixels.len(),
            model: model.keypoints.len(),
        });
    }
    Ok(())
}

/// Sum of squared distances between corresponding contact points (m²).
pub fn cp_loss(predicted: &ContactSet, truth: &ContactSet) -> Result<f64, ProjectionError> {
    if predicted.len() != truth.len() {
        return Err(ProjectionError::ContactCountMismatch {
            left: predicted.len(),
            right: truth.len(),
        });
    }
    Ok(predicted
        .points()
        .iter()
        .zip(truth.points())
        .map(|(a, b)| (a - b).norm_squared())
        .sum())
}

/// Squared Frobenius distance between two force sequences, summed over
/// frames (N²).
pub fn force_mse(truth_seq: &[ForceSet], predicted_seq: &[ForceSet]) -> Result<f64, ProjectionError> {
    if truth_seq.len() != predicted_seq.len() {
        return Err(ProjectionError::ForceShapeMismatch(format!(
            "{} frames vs {} frames",
            truth_seq.len(),
            predicted_seq.len()
        )));
    }
    let mut total = 0.0;
    for (t, (a, b)) in truth_seq.iter().zip(predicted_seq).enumerate() {
        if a.len() != b.len() {
            return Err(ProjectionError::ForceShapeMismatch(format!(
                "frame {t}: {} contacts vs {}",
                a.len(),
                b.len()
            )));
        }
        total += a.forces().iter().zip(b.forces()).map(|(x, y)| (x - y).norm_squared()).sum::<f64>();
    }
    Ok(total)
}
