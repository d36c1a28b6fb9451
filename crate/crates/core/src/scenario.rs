//! Scenario and results files.
//!
//! Both are pretty-printed JSON documents carrying a `schema_version`.
//! Numbers are written in shortest round-trip decimal form, so a load/save
//! cycle reproduces every value bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::finite_diff::FdConfig;
use crate::geometry::PoseEstimate;
use crate::metrics::{quaternion_distance, EvalReport};
use crate::optimizer::{GradCheckReport, OptimizerOptions, TrajectoryProblem};
use crate::physics::{
    simulate_trajectory, ContactSet, ForceSet, ObjectModel, PhysicsError, RigidBodyState,
    SimulationConfig, DEFAULT_CONTACT_RADIUS,
};
use crate::projection::{project_points, Camera, FrameObservation, Pose};
use crate::serde_util;
use crate::synthetic::SyntheticSpec;

pub const SCHEMA_VERSION: u32 = 1;

/// Ground-truth poses must be reproduced this closely (m and rad).
const POSE_TOL: f64 = 1e-9;
/// Noise-free ground-truth pixels must be reproduced this closely.
const PIXEL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("unknown fields: {}", .0.join(", "))]
    UnknownFields(Vec<String>),
    #[error("schema_version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u64, expected: u32 },
    #[error("at {path}: {message}")]
    Invalid { path: String, message: String },
    #[error("ground truth disagrees with re-simulation at frame {frame}: {detail}")]
    InconsistentGroundTruth { frame: usize, detail: String },
}

impl ScenarioError {
    pub fn code(&self) -> &'static str {
        match self {
            ScenarioError::Io { .. } => "io_error",
            ScenarioError::Schema { .. } => "schema_violation",
            ScenarioError::UnknownFields(_) => "unknown_field",
            ScenarioError::SchemaVersion { .. } => "schema_version_mismatch",
            ScenarioError::Invalid { .. } => "invalid_scenario",
            ScenarioError::InconsistentGroundTruth { .. } => "inconsistent_ground_truth",
        }
    }

    fn invalid(path: impl Into<String>, message: impl ToString) -> Self {
        ScenarioError::Invalid { path: path.into(), message: message.to_string() }
    }
}

/// How unknown fields are treated on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadMode {
    #[default]
    Strict,
    /// Unknown fields are ignored and reported as warnings.
    Lenient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Loaded<T> {
    pub value: T,
    /// Paths of ignored fields (lenient mode only).
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(with = "serde_util::vec3_nested")]
    pub forces: Vec<Vec<Vector3<f64>>>,
    #[serde(with = "serde_util::vec3_list")]
    pub contacts: Vec<Vector3<f64>>,
    #[serde(default = "default_contact_radius")]
    pub contact_radius: f64,
    /// Object pose after each force frame, aligned with the observations.
    pub poses: Vec<Pose>,
    #[serde(default)]
    pub noise_px: f64,
    #[serde(default)]
    pub occlusion_rate: f64,
}

fn default_contact_radius() -> f64 {
    DEFAULT_CONTACT_RADIUS
}

impl GroundTruth {
    pub fn force_seq(&self) -> Result<Vec<ForceSet>, PhysicsError> {
        self.forces.iter().map(|f| ForceSet::new(f.clone())).collect()
    }

    pub fn contact_set(&self) -> Result<ContactSet, PhysicsError> {
        ContactSet::with_radius(self.contacts.clone(), self.contact_radius)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub object: ObjectModel,
    pub camera: Camera,
    #[serde(default)]
    pub sim: SimulationConfig,
    pub initial_state: RigidBodyState,
    pub n_frames: usize,
    /// `observations[i]` annotates frame `i + 1`.
    pub observations: Vec<FrameObservation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruth>,
}

impl Scenario {
    pub fn problem(&self) -> TrajectoryProblem<'_> {
        TrajectoryProblem {
            s0: self.initial_state,
            model: &self.object,
            sim: &self.sim,
            camera: &self.camera,
            observations: &self.observations,
        }
    }

    /// Structural checks that serde alone cannot express.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.object.validate().map_err(|e| ScenarioError::invalid("object", e))?;
        self.camera.validate().map_err(|e| ScenarioError::invalid("camera", e))?;
        self.sim.validate().map_err(|e| ScenarioError::invalid("sim", e))?;
        if !self.initial_state.is_finite() {
            return Err(ScenarioError::invalid("initial_state", "non-finite value"));
        }
        if self.n_frames == 0 {
            return Err(ScenarioError::invalid("n_frames", "must be at least 1"));
        }
        if self.observations.len() != self.n_frames {
            return Err(ScenarioError::invalid(
                "observations",
                format!("{} entries for n_frames = {}", self.observations.len(), self.n_frames),
            ));
        }
        let n_kp = self.object.keypoints.len();
        let n_cp = self.observations[0].contact_pixels.len();
        for (i, obs) in self.observations.iter().enumerate() {
            let at = |field: &str| format!("observations[{i}].{field}");
            if obs.t != i + 1 {
                return Err(ScenarioError::invalid(at("t"), format!("expected {}, found {}", i + 1, obs.t)));
            }
            if obs.keypoint_pixels.len() != n_kp {
                return Err(ScenarioError::invalid(
                    at("keypoint_pixels"),
                    format!("{} entries for {n_kp} keypoints", obs.keypoint_pixels.len()),
                ));
            }
            if obs.contact_pixels.len() != n_cp {
                return Err(ScenarioError::invalid(
                    at("contact_pixels"),
                    format!("{} entries, frame 1 has {n_cp}", obs.contact_pixels.len()),
                ));
            }
            obs.validate(&self.camera).map_err(|e| ScenarioError::invalid(at("keypoint_pixels"), e))?;
        }
        if let Some(gt) = &self.ground_truth {
            self.validate_ground_truth_shape(gt)?;
        }
        Ok(())
    }

    fn validate_ground_truth_shape(&self, gt: &GroundTruth) -> Result<(), ScenarioError> {
        let contacts = gt.contact_set().map_err(|e| ScenarioError::invalid("ground_truth.contacts", e))?;
        if gt.forces.len() != self.n_frames {
            return Err(ScenarioError::invalid(
                "ground_truth.forces",
                format!("{} frames for n_frames = {}", gt.forces.len(), self.n_frames),
            ));
        }
        for (t, f) in gt.forces.iter().enumerate() {
            if f.len() != contacts.len() {
                return Err(ScenarioError::invalid(
                    format!("ground_truth.forces[{t}]"),
                    format!("{} forces for {} contacts", f.len(), contacts.len()),
                ));
            }
        }
        gt.force_seq().map_err(|e| ScenarioError::invalid("ground_truth.forces", e))?;
        if gt.poses.len() != self.n_frames {
            return Err(ScenarioError::invalid(
                "ground_truth.poses",
                format!("{} poses for n_frames = {}", gt.poses.len(), self.n_frames),
            ));
        }
        let n_cp = self.observations[0].contact_pixels.len();
        if n_cp != 0 && n_cp != contacts.len() {
            return Err(ScenarioError::invalid(
                "observations[0].contact_pixels",
                format!("{n_cp} entries for {} ground-truth contacts", contacts.len()),
            ));
        }
        Ok(())
    }

    /// Re-simulates the ground truth and compares it with the stored poses
    /// and, for noise-free scenarios, with the observed pixels.
    pub fn check_ground_truth(&self) -> Result<(), ScenarioError> {
        let Some(gt) = &self.ground_truth else {
            return Ok(());
        };
        let force_seq = gt.force_seq().map_err(|e| ScenarioError::invalid("ground_truth.forces", e))?;
        let contacts = gt.contact_set().map_err(|e| ScenarioError::invalid("ground_truth.contacts", e))?;
        let states = simulate_trajectory(&self.initial_state, &force_seq, &contacts, &self.object, &self.sim)
            .map_err(|e| ScenarioError::InconsistentGroundTruth { frame: 0, detail: e.to_string() })?;
        let kps = self.object.keypoint_positions();
        for (i, (state, stored)) in states[1..].iter().zip(&gt.poses).enumerate() {
            let frame = i + 1;
            let mismatch = |detail: String| ScenarioError::InconsistentGroundTruth { frame, detail };
            let pose = Pose::from(state);
            let dt = (pose.translation - stored.translation).norm();
            let dr = quaternion_distance(&pose.rotation, &stored.rotation).unwrap_or(f64::INFINITY);
            if !(dt <= POSE_TOL && dr <= POSE_TOL) {
                return Err(mismatch(format!("pose differs by {dt:e} m, {dr:e} rad")));
            }
            if gt.noise_px != 0.0 {
                continue;
            }
            let obs = &self.observations[i];
            let kp_px = project_points(&kps, &pose, &self.camera).map_err(|e| mismatch(e.to_string()))?;
            let cp_px = project_points(contacts.points(), &pose, &self.camera).map_err(|e| mismatch(e.to_string()))?;
            let pairs = obs.keypoint_pixels.iter().zip(&kp_px).chain(obs.contact_pixels.iter().zip(&cp_px));
            for (observed, predicted) in pairs {
                if let Some(observed) = observed {
                    let d = (observed - predicted).norm();
                    if !(d <= PIXEL_TOL) {
                        return Err(mismatch(format!("observed pixel differs by {d:e} px")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        to_json(self)
    }
}

/// Serializes any document as pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("documents serialize to JSON");
    s.push('\n');
    s
}

/// Parses a versioned JSON document.
pub fn parse_document<T: DeserializeOwned>(text: &str, mode: LoadMode) -> Result<Loaded<T>, ScenarioError> {
    let root: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| ScenarioError::Schema { path: ".".into(), message: e.to_string() })?;
    match root.get("schema_version") {
        None => {
            return Err(ScenarioError::Schema {
                path: "schema_version".into(),
                message: "missing field `schema_version`".into(),
            })
        }
        Some(v) => match v.as_u64() {
            Some(found) if found == SCHEMA_VERSION as u64 => {}
            Some(found) => return Err(ScenarioError::SchemaVersion { found, expected: SCHEMA_VERSION }),
            None => {
                return Err(ScenarioError::Schema {
                    path: "schema_version".into(),
                    message: "expected an unsigned integer".into(),
                })
            }
        },
    }

    let mut unknown = Vec::new();
    let mut de = serde_json::Deserializer::from_str(text);
    let mut record = |path: serde_ignored::Path<'_>| unknown.push(path.to_string());
    let tracked = serde_ignored::Deserializer::new(&mut de, &mut record);
    let value: T = serde_path_to_error::deserialize(tracked).map_err(|e| {
        let path = e.path().to_string();
        let message = e.inner().to_string();
        ScenarioError::Schema { path: field_path(&path, &message), message }
    })?;

    if !unknown.is_empty() {
        match mode {
            LoadMode::Strict => return Err(ScenarioError::UnknownFields(unknown)),
            LoadMode::Lenient => {
                for path in &unknown {
                    log::warn!("ignoring unknown field {path}");
                }
            }
        }
    }
    Ok(Loaded { value, warnings: unknown })
}

/// Extends the container path with the missing field's name, so that a
/// missing `mass` under `object` is reported as `object.mass`.
fn field_path(path: &str, message: &str) -> String {
    let missing = message
        .strip_prefix("missing field `")
        .and_then(|rest| rest.split('`').next());
    match (missing, path) {
        (Some(field), "." | "") => field.to_string(),
        (Some(field), p) => format!("{p}.{field}"),
        (None, p) => p.to_string(),
    }
}

fn read(path: &Path) -> Result<String, ScenarioError> {
    std::fs::read_to_string(path)
        .map_err(|e| ScenarioError::Io { path: path.display().to_string(), message: e.to_string() })
}

fn write(path: &Path, text: &str) -> Result<(), ScenarioError> {
    std::fs::write(path, text)
        .map_err(|e| ScenarioError::Io { path: path.display().to_string(), message: e.to_string() })
}

/// Parses, validates and consistency-checks a scenario document.
pub fn parse_scenario(text: &str, mode: LoadMode) -> Result<Loaded<Scenario>, ScenarioError> {
    let loaded = parse_document::<Scenario>(text, mode)?;
    loaded.value.validate()?;
    loaded.value.check_ground_truth()?;
    Ok(loaded)
}

pub fn load_scenario(path: impl AsRef<Path>, mode: LoadMode) -> Result<Loaded<Scenario>, ScenarioError> {
    parse_scenario(&read(path.as_ref())?, mode)
}

pub fn save_scenario(path: impl AsRef<Path>, scenario: &Scenario) -> Result<(), ScenarioError> {
    write(path.as_ref(), &scenario.to_json())
}

/// Settings a run depended on, sufficient to repeat it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ConfigEcho {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario_sha256: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimulationConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fd: Option<FdConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerOptions>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    /// Remaining command options by name.
    pub options: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub config: ConfigEcho,
    /// Headline numbers of the run.
    pub summary: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "serde_util::opt_vec3_nested")]
    pub force_seq: Option<Vec<Vec<Vector3<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "serde_util::opt_vec3_list")]
    pub contacts: Option<Vec<Vector3<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub states: Option<Vec<RigidBodyState>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_history: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    /// One entry per frame; `None` where the pose could not be solved.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poses: Option<Vec<Option<PoseEstimate>>>,
    /// Per-finger RMS reprojection residual of the contact solve.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contact_residuals_px: Option<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_check: Option<GradCheckReport>,
}

impl ResultsFile {
    pub fn new(command: &str, seed: u64, config: ConfigEcho) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            config,
            summary: BTreeMap::new(),
            force_seq: None,
            contacts: None,
            states: None,
            report: None,
            loss_history: None,
            converged: None,
            poses: None,
            contact_residuals_px: None,
            grad_check: None,
        }
    }
}

pub fn save_results(path: impl AsRef<Path>, results: &ResultsFile) -> Result<(), ScenarioError> {
    write(path.as_ref(), &to_json(results))
}

pub fn load_results(path: impl AsRef<Path>, mode: LoadMode) -> Result<Loaded<ResultsFile>, ScenarioError> {
    parse_document(&read(path.as_ref())?, mode)
}
