//! Seeded generator of fully annotated scenarios.
//!
//! A scenario is sampled as object, camera, initial state, contacts and a
//! force sequence, then simulated and projected. Every random draw comes from
//! one ChaCha stream seeded by the caller, so a seed pins the scenario down to
//! the last bit.

use nalgebra::{DMatrix, DVector, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objects;
use crate::physics::{
    simulate_trajectory, ContactSet, ForceSet, Keypoint, ObjectModel, PhysicsError,
    RigidBodyState, SimulationConfig, DEFAULT_CONTACT_RADIUS,
};
use crate::projection::{project_points, Camera, FrameObservation, Pose};
use crate::scenario::{GroundTruth, Scenario, SCHEMA_VERSION};

const MAX_ATTEMPTS: usize = 64;
const RANDOM_OBJECT_MASS: f64 = 0.5;
const RANDOM_OBJECT_BOX: f64 = 0.2;
const RANDOM_KEYPOINTS: usize = 10;
/// Projections must stay this far inside the image before noise is added.
const IMAGE_MARGIN_PX: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForceProfile {
    Zero,
    Constant,
    SmoothRandom,
    /// Constant forces that hold the body still against gravity.
    Hover,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_frames: usize,
    pub k: usize,
    pub force_profile: ForceProfile,
    pub noise_px: f64,
    pub occlusion_rate: f64,
    /// Largest norm of any single planted force (N).
    pub max_force: f64,
    /// Bundled object to use instead of a random one.
    pub object: Option<String>,
    pub max_linear_speed: f64,
    pub max_angular_speed: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_frames: 10,
            k: 5,
            force_profile: ForceProfile::SmoothRandom,
            noise_px: 0.0,
            occlusion_rate: 0.0,
            max_force: 5.0,
            object: None,
            max_linear_speed: 0.2,
            max_angular_speed: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SyntheticError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("unknown object {0:?}")]
    UnknownObject(String),
    #[error("no valid scenario after {attempts} attempts")]
    Ungenerable { attempts: usize },
    #[error(transparent)]
    Physics(#[from] PhysicsError),
}

impl SyntheticError {
    pub fn code(&self) -> &'static str {
        match self {
            SyntheticError::InvalidSpec(_) => "invalid_spec",
            SyntheticError::UnknownObject(_) => "unknown_object",
            SyntheticError::Ungenerable { .. } => "ungenerable_spec",
            SyntheticError::Physics(e) => e.code(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        let bad = |m: &str| Err(SyntheticError::InvalidSpec(m.to_string()));
        if self.n_frames == 0 {
            return bad("n_frames must be at least 1");
        }
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if !(self.noise_px >= 0.0 && self.noise_px.is_finite()) {
            return bad("noise_px must be non-negative");
        }
        if !(0.0..1.0).contains(&self.occlusion_rate) {
            return bad("occlusion_rate must lie in [0, 1)");
        }
        for (name, v) in [
            ("max_force", self.max_force),
            ("max_linear_speed", self.max_linear_speed),
            ("max_angular_speed", self.max_angular_speed),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be non-negative"));
            }
        }
        if let Some(name) = &self.object {
            if objects::named_object(name).is_none() {
                return Err(SyntheticError::UnknownObject(name.clone()));
            }
        }
        Ok(())
    }
}

/// Camera looking along world +y from the origin, world z up, 1920×1080.
pub fn default_camera() -> Camera {
    let r = Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
    let rotation = UnitQuaternion::from_matrix(&r);
    Camera::new(1500.0, 1500.0, 960.0, 540.0).with_extrinsic(Pose::new(rotation, Vector3::zeros()))
}

/// Generates a scenario fully determined by `seed` and `spec`.
pub fn gen_synthetic(seed: u64, spec: &SyntheticSpec) -> Result<Scenario, SyntheticError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let camera = default_camera();
    let sim = SimulationConfig::default();
    for _ in 0..MAX_ATTEMPTS {
        if let Some(scenario) = attempt(&mut rng, seed, spec, &camera, &sim)? {
            return Ok(scenario);
        }
    }
    Err(SyntheticError::Ungenerable { attempts: MAX_ATTEMPTS })
}

fn attempt(
    rng: &mut ChaCha8Rng,
    seed: u64,
    spec: &SyntheticSpec,
    camera: &Camera,
    sim: &SimulationConfig,
) -> Result<Option<Scenario>, SyntheticError> {
    let model = match &spec.object {
        Some(name) => objects::named_object(name).ok_or_else(|| SyntheticError::UnknownObject(name.clone()))?,
        None => random_object(rng),
    };
    let (lo, hi) = keypoint_bounds(&model);

    let still = spec.force_profile == ForceProfile::Hover;
    let position = Vector3::new(
        rng.gen_range(-0.1..0.1),
        2.0 + rng.gen_range(-0.1..0.1),
        rng.gen_range(0.15..0.25),
    );
    let mut s0 = RigidBodyState::at_rest(position, random_rotation(rng));
    if !still {
        s0.linear_velocity = uniform_vec(rng, spec.max_linear_speed);
        s0.angular_velocity = uniform_vec(rng, spec.max_angular_speed);
    }

    let contact_points: Vec<_> = (0..spec.k).map(|_| surface_point(rng, &lo, &hi)).collect();
    let contacts = ContactSet::with_radius(contact_points, DEFAULT_CONTACT_RADIUS)?;

    let Some(force_seq) = plant_forces(rng, spec, &model, sim, &s0, &contacts) else {
        return Ok(None);
    };
    let states = simulate_trajectory(&s0, &force_seq, &contacts, &model, sim)?;

    let kps = model.keypoint_positions();
    let mut observations = Vec::with_capacity(spec.n_frames);
    let noise = Normal::new(0.0, spec.noise_px).expect("noise_px validated");
    for (t, state) in states.iter().enumerate().skip(1) {
        let pose = Pose::from(state);
        let (Ok(kp_px), Ok(cp_px)) =
            (project_points(&kps, &pose, camera), project_points(contacts.points(), &pose, camera))
        else {
            return Ok(None);
        };
        if !kp_px.iter().chain(&cp_px).all(|p| well_inside(camera, p)) {
            return Ok(None);
        }
        let mut keypoint_pixels = occlude(rng, &kp_px, spec.occlusion_rate);
        if keypoint_pixels.iter().all(Option::is_none) {
            let keep = rng.gen_range(0..kp_px.len());
            keypoint_pixels[keep] = Some(kp_px[keep]);
        }
        let mut contact_pixels = occlude(rng, &cp_px, spec.occlusion_rate);
        if spec.noise_px > 0.0 {
            for px in keypoint_pixels.iter_mut().chain(contact_pixels.iter_mut()).flatten() {
                *px += Vector2::new(noise.sample(rng), noise.sample(rng));
            }
        }
        let obs = FrameObservation { t, keypoint_pixels, contact_pixels };
        if obs.validate(camera).is_err() {
            return Ok(None);
        }
        observations.push(obs);
    }

    let ground_truth = GroundTruth {
        forces: force_seq.iter().map(|f| f.forces().to_vec()).collect(),
        contacts: contacts.points().to_vec(),
        contact_radius: contacts.radius(),
        poses: states[1..].iter().map(Pose::from).collect(),
        noise_px: spec.noise_px,
        occlusion_rate: spec.occlusion_rate,
    };
    Ok(Some(Scenario {
        schema_version: SCHEMA_VERSION,
        name: Some(format!("synthetic-{seed}")),
        object: model,
        camera: *camera,
        sim: *sim,
        initial_state: s0,
        n_frames: spec.n_frames,
        observations,
        ground_truth: Some(ground_truth),
    }))
}

fn random_object(rng: &mut ChaCha8Rng) -> ObjectModel {
    let half = RANDOM_OBJECT_BOX / 2.0;
    loop {
        let points: Vec<Vector3<f64>> = (0..RANDOM_KEYPOINTS).map(|_| uniform_vec(rng, half)).collect();
        if !spread_in_3d(&points) {
            continue;
        }
        let keypoints: Vec<Keypoint> = points
            .into_iter()
            .enumerate()
            .map(|(i, position)| Keypoint { name: format!("kp{i}"), position })
            .collect();
        let mut model = ObjectModel {
            name: None,
            mass: RANDOM_OBJECT_MASS,
            inertia_body: Matrix3::identity(),
            keypoints,
        };
        let (lo, hi) = keypoint_bounds(&model);
        model.inertia_body = ObjectModel::box_inertia(RANDOM_OBJECT_MASS, hi - lo);
        return model;
    }
}

/// Smallest principal spread of the point cloud is at least 2 cm.
fn spread_in_3d(points: &[Vector3<f64>]) -> bool {
    let mean = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let cov = points.iter().map(|p| (p - mean) * (p - mean).transpose()).sum::<Matrix3<f64>>()
        / points.len() as f64;
    let min_eig = cov.symmetric_eigenvalues().min();
    min_eig.sqrt() >= 0.02
}

fn keypoint_bounds(model: &ObjectModel) -> (Vector3<f64>, Vector3<f64>) {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for kp in &model.keypoints {
        lo = lo.inf(&kp.position);
        hi = hi.sup(&kp.position);
    }
    (lo, hi)
}

fn uniform_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vector3<f64> {
    if scale == 0.0 {
        return Vector3::zeros();
    }
    Vector3::from_fn(|_, _| rng.gen_range(-scale..scale))
}

fn random_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    let mut draw = || -> f64 { StandardNormal.sample(&mut *rng) };
    let q = Quaternion::new(draw(), draw(), draw(), draw());
    UnitQuaternion::from_quaternion(q)
}

/// Uniform point on one face of the axis-aligned box `[lo, hi]`.
fn surface_point(rng: &mut ChaCha8Rng, lo: &Vector3<f64>, hi: &Vector3<f64>) -> Vector3<f64> {
    let axis = rng.gen_range(0..3);
    let mut p = Vector3::from_fn(|i, _| rng.gen_range(lo[i]..=hi[i]));
    p[axis] = if rng.gen_bool(0.5) { lo[axis] } else { hi[axis] };
    p
}

fn well_inside(camera: &Camera, px: &Vector2<f64>) -> bool {
    px.x >= IMAGE_MARGIN_PX
        && px.y >= IMAGE_MARGIN_PX
        && px.x <= camera.image_width as f64 - IMAGE_MARGIN_PX
        && px.y <= camera.image_height as f64 - IMAGE_MARGIN_PX
}

fn occlude(rng: &mut ChaCha8Rng, pixels: &[Vector2<f64>], rate: f64) -> Vec<Option<Vector2<f64>>> {
    pixels
        .iter()
        .map(|p| if rate > 0.0 && rng.gen_bool(rate) { None } else { Some(*p) })
        .collect()
}

fn clamp_norm(f: Vector3<f64>, max: f64) -> Vector3<f64> {
    let n = f.norm();
    if n > max {
        f * (max / n)
    } else {
        f
    }
}

fn plant_forces(
    rng: &mut ChaCha8Rng,
    spec: &SyntheticSpec,
    model: &ObjectModel,
    sim: &SimulationConfig,
    s0: &RigidBodyState,
    contacts: &ContactSet,
) -> Option<Vec<ForceSet>> {
    let k = spec.k;
    let n = spec.n_frames;
    let support = -sim.gravity * model.mass / k as f64;
    let per_frame: Vec<Vec<Vector3<f64>>> = match spec.force_profile {
        ForceProfile::Zero => vec![vec![Vector3::zeros(); k]; n],
        ForceProfile::Constant => {
            let frame: Vec<_> = (0..k)
                .map(|_| clamp_norm(support + uniform_vec(rng, 1.0), spec.max_force))
                .collect();
            vec![frame; n]
        }
        ForceProfile::SmoothRandom => {
            let common = uniform_vec(rng, 0.5);
            let waves: Vec<_> = (0..k)
                .map(|_| {
                    let offset = uniform_vec(rng, 0.5);
                    let amplitude = uniform_vec(rng, 0.5);
                    let freq = rng.gen_range(1.0..4.0);
                    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                    (offset, amplitude, freq, phase)
                })
                .collect();
            (0..n)
                .map(|t| {
                    let time = t as f64 * sim.frame_dt;
                    waves
                        .iter()
                        .map(|(offset, amplitude, freq, phase)| {
                            let f = support + common + offset + amplitude * (freq * time + phase).sin();
                            clamp_norm(f, spec.max_force)
                        })
                        .collect()
                })
                .collect()
        }
        ForceProfile::Hover => {
            let frame = hover_forces(s0, contacts, -sim.gravity * model.mass)?;
            if frame.iter().any(|f| f.norm() > spec.max_force) {
                return None;
            }
            vec![frame; n]
        }
    };
    per_frame.into_iter().map(|f| ForceSet::new(f).ok()).collect()
}

/// Minimum-norm forces at the contacts producing net force `target` and no
/// torque at the current orientation.
fn hover_forces(
    state: &RigidBodyState,
    contacts: &ContactSet,
    target: Vector3<f64>,
) -> Option<Vec<Vector3<f64>>> {
    let k = contacts.len();
    let mut a = DMatrix::zeros(6, 3 * k);
    for (i, c) in contacts.points().iter().enumerate() {
        let r = state.orientation * c;
        a.view_mut((0, 3 * i), (3, 3)).copy_from(&Matrix3::identity());
        a.view_mut((3, 3 * i), (3, 3)).copy_from(&r.cross_matrix());
    }
    let mut w = DVector::zeros(6);
    w.rows_mut(0, 3).copy_from(&target);
    let f = a.clone().svd(true, true).solve(&w, 1e-12).ok()?;
    let achieved = &a * &f;
    if (achieved - w).norm() > 1e-9 * target.norm().max(1.0) {
        return None;
    }
    Some(f.as_slice().chunks_exact(3).map(Vector3::from_column_slice).collect())
}
