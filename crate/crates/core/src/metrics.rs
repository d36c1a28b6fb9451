//! Evaluation metrics for recovered trajectories and contact points.

use nalgebra::Quaternion;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::physics::{ContactSet, ObjectModel, RigidBodyState};
use crate::projection::{project_points, Camera, FrameObservation, Pose, ProjectionError};

const UNIT_NORM_TOL: f64 = 1e-6;

/// Averaging rule used for `kp_error_px`, recorded in every report.
pub const KP_ERROR_CONVENTION: &str = "mean over visible keypoints within a frame, then mean over frames";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("quaternion norm {0} is not 1")]
    NonUnitQuaternion(f64),
    #[error("{what}: expected {expected} entries, found {found}")]
    SequenceMismatch { what: &'static str, expected: usize, found: usize },
    #[error("frame {frame}: {source}")]
    Projection {
        frame: usize,
        #[source]
        source: ProjectionError,
    },
}

impl MetricsError {
    pub fn code(&self) -> &'static str {
        match self {
            MetricsError::NonUnitQuaternion(_) => "non_unit_quaternion",
            MetricsError::SequenceMismatch { .. } => "sequence_mismatch",
            MetricsError::Projection { source, .. } => source.code(),
        }
    }
}

/// Rotation angle separating two orientations, in `[0, π]`.
///
/// Equal to `2·acos(|q1·q2|)`, evaluated as `4·atan2(‖q1 − s·q2‖, ‖q1 + s·q2‖)`
/// with `s = sign(q1·q2)`, which keeps full precision near zero.
pub fn quaternion_distance(q1: &Quaternion<f64>, q2: &Quaternion<f64>) -> Result<f64, MetricsError> {
    for q in [q1, q2] {
        let n = q.norm();
        if !((n - 1.0).abs() <= UNIT_NORM_TOL) {
            return Err(MetricsError::NonUnitQuaternion(n));
        }
    }
    let a = q1.coords;
    let b = if q1.coords.dot(&q2.coords) < 0.0 { -q2.coords } else { q2.coords };
    Ok(4.0 * (a - b).norm().atan2((a + b).norm()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub t: usize,
    /// `None` when no keypoint is visible in the frame.
    pub kp_error_px: Option<f64>,
    pub rotation_error_rad: f64,
    pub translation_error_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kp_error_px: f64,
    pub kp_error_convention: String,
    pub rotation_error_rad: f64,
    pub translation_error_m: f64,
    pub cp_error_m: f64,
    /// Per-finger L1 distance (m).
    pub per_contact_error_m: Vec<f64>,
    pub per_frame: Vec<FrameMetrics>,
}

/// Compares a simulated trajectory and predicted contacts to references.
///
/// `simulated[i]`, `reference_poses[i]` and `observations[i]` describe the
/// same frame.
pub fn evaluate(
    simulated: &[RigidBodyState],
    reference_poses: &[Pose],
    observations: &[FrameObservation],
    predicted_cp: &ContactSet,
    truth_cp: &ContactSet,
    model: &ObjectModel,
    camera: &Camera,
) -> Result<EvalReport, MetricsError> {
    let n = simulated.len();
    for (what, found) in [("reference_poses", reference_poses.len()), ("observations", observations.len())] {
        if found != n {
            return Err(MetricsError::SequenceMismatch { what, expected: n, found });
        }
    }
    if predicted_cp.len() != truth_cp.len() {
        return Err(MetricsError::SequenceMismatch {
            what: "contacts",
            expected: truth_cp.len(),
            found: predicted_cp.len(),
        });
    }

    let kps = model.keypoint_positions();
    let mut per_frame = Vec::with_capacity(n);
    for ((state, reference), obs) in simulated.iter().zip(reference_poses).zip(observations) {
        let pose = Pose::from(state);
        let projected = project_points(&kps, &pose, camera)
            .map_err(|source| MetricsError::Projection { frame: obs.t, source })?;
        if obs.keypoint_pixels.len() != kps.len() {
            return Err(MetricsError::SequenceMismatch {
                what: "keypoint_pixels",
                expected: kps.len(),
                found: obs.keypoint_pixels.len(),
            });
        }
        let visible = obs.visible_count();
        let kp_error_px = (visible > 0).then(|| {
            obs.visible_keypoints().map(|(i, px)| (projected[i] - px).norm()).sum::<f64>() / visible as f64
        });
        per_frame.push(FrameMetrics {
            t: obs.t,
            kp_error_px,
            rotation_error_rad: quaternion_distance(&pose.rotation, &reference.rotation)?,
            translation_error_m: (pose.translation - reference.translation).norm(),
        });
    }

    let per_contact_error_m: Vec<f64> = predicted_cp
        .points()
        .iter()
        .zip(truth_cp.points())
        .map(|(p, q)| (p - q).abs().sum())
        .collect();

    let kp_frames: Vec<f64> = per_frame.iter().filter_map(|f| f.kp_error_px).collect();
    Ok(EvalReport {
        kp_error_px: mean(&kp_frames),
        kp_error_convention: KP_ERROR_CONVENTION.to_string(),
        rotation_error_rad: mean(&per_frame.iter().map(|f| f.rotation_error_rad).collect::<Vec<_>>()),
        translation_error_m: mean(&per_frame.iter().map(|f| f.translation_error_m).collect::<Vec<_>>()),
        cp_error_m: mean(&per_contact_error_m),
        per_contact_error_m,
        per_frame,
    })
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}
