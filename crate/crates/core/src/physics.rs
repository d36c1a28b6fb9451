//! Rigid-body forward dynamics.
//!
//! A single free-floating rigid body driven by world-frame contact forces and
//! gravity. One call to [`step`] advances one frame interval using a fixed
//! number of substeps. Each substep updates velocities first, then the pose.
//!
//! Forces are constant over a frame, so the center of mass sees a constant
//! acceleration. The default [`LinearScheme::ConstantAcceleration`] moves the
//! position with the mean of the old and new velocity, which is exact for that
//! case; [`LinearScheme::SemiImplicitEuler`] uses the new velocity alone.
//!
//! Angular velocity is advanced in momentum form: the world angular momentum
//! `L = I_world ω` receives the torque impulse, the orientation is rotated by
//! the resulting velocity, and `ω` is recovered against the rotated inertia.
//! To first order this is the Euler-equation update
//! `ω ← ω + dt·I_world⁻¹(τ − ω × I_world ω)`; unlike the explicit form it
//! leaves `L` untouched when no torque acts.

use nalgebra::{Matrix3, SVector, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::serde_util;

/// Dimension of the flattened state: position, quaternion (w, x, y, z),
/// linear velocity, angular velocity.
pub const STATE_DIM: usize = 13;

pub type StateVector = SVector<f64, STATE_DIM>;

pub const DEFAULT_CONTACT_RADIUS: f64 = 1.0;
pub const DEFAULT_FORCE_BOUND: f64 = 100.0;
pub const DEFAULT_FRAME_DT: f64 = 1.0 / 30.0;
pub const DEFAULT_SUBSTEPS: usize = 10;
pub const STANDARD_GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PhysicsError {
    #[error("non-finite value in {0}")]
    NonFiniteState(&'static str),
    #[error("{contacts} contact points but {forces} forces")]
    ContactForceMismatch { contacts: usize, forces: usize },
    #[error("contact {index} lies {distance} m from the center of mass (limit {radius} m)")]
    ContactOutOfBounds { index: usize, distance: f64, radius: f64 },
    #[error("force {index} component {component} is {value} N (limit {bound} N)")]
    ForceOutOfBounds { index: usize, component: usize, value: f64, bound: f64 },
    #[error("empty contact set")]
    NoContacts,
    #[error("invalid object model: {0}")]
    InvalidModel(String),
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("frame {frame}: {source}")]
    AtFrame {
        frame: usize,
        #[source]
        source: Box<PhysicsError>,
    },
}

impl PhysicsError {
    pub fn code(&self) -> &'static str {
        match self {
            PhysicsError::NonFiniteState(_) => "non_finite_state",
            PhysicsError::ContactForceMismatch { .. } => "contact_force_mismatch",
            PhysicsError::ContactOutOfBounds { .. } => "contact_out_of_bounds",
            PhysicsError::ForceOutOfBounds { .. } => "force_out_of_bounds",
            PhysicsError::NoContacts => "no_contacts",
            PhysicsError::InvalidModel(_) => "invalid_model",
            PhysicsError::InvalidConfig(_) => "invalid_config",
            PhysicsError::AtFrame { source, .. } => source.code(),
        }
    }

    fn at_frame(self, frame: usize) -> Self {
        PhysicsError::AtFrame { frame, source: Box::new(self) }
    }
}

/// Pose and twist of the body. Position is the world-frame center of mass,
/// orientation maps object coordinates into the world, both velocities are
/// expressed in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidBodyState {
    #[serde(with = "serde_util::vec3")]
    pub position: Vector3<f64>,
    #[serde(with = "serde_util::unit_quat")]
    pub orientation: UnitQuaternion<f64>,
    #[serde(with = "serde_util::vec3")]
    pub linear_velocity: Vector3<f64>,
    #[serde(with = "serde_util::vec3")]
    pub angular_velocity: Vector3<f64>,
}

impl Default for RigidBodyState {
    fn default() -> Self {
        Self::at_rest(Vector3::zeros(), UnitQuaternion::identity())
    }
}

impl RigidBodyState {
    pub fn at_rest(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Self {
            position,
            orientation,
            linear_velocity: Vector3::zeros(),
            angular_velocity: Vector3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|x| x.is_finite())
    }

    /// Flattens to `[p, q(w,x,y,z), v, ω]`.
    pub fn to_vector(&self) -> StateVector {
        let q = self.orientation.quaternion();
        let mut out = StateVector::zeros();
        out.fixed_rows_mut::<3>(0).copy_from(&self.position);
        out[3] = q.w;
        out[4] = q.i;
        out[5] = q.j;
        out[6] = q.k;
        out.fixed_rows_mut::<3>(7).copy_from(&self.linear_velocity);
        out.fixed_rows_mut::<3>(10).copy_from(&self.angular_velocity);
        out
    }

    /// Inverse of [`to_vector`](Self::to_vector). The quaternion block is
    /// renormalized, so off-manifold perturbations are projected back.
    pub fn from_vector(v: &StateVector) -> Result<Self, PhysicsError> {
        if !v.iter().all(|x| x.is_finite()) {
            return Err(PhysicsError::NonFiniteState("state vector"));
        }
        let q = nalgebra::Quaternion::new(v[3], v[4], v[5], v[6]);
        if q.norm() == 0.0 {
            return Err(PhysicsError::NonFiniteState("zero quaternion"));
        }
        Ok(Self {
            position: v.fixed_rows::<3>(0).into_owned(),
            orientation: UnitQuaternion::from_quaternion(q),
            linear_velocity: v.fixed_rows::<3>(7).into_owned(),
            angular_velocity: v.fixed_rows::<3>(10).into_owned(),
        })
    }

    /// Maps an object-frame point into the world frame.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.orientation * p + self.position
    }
}

/// Contact points in the object frame, relative to the center of mass.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactSet {
    points: Vec<Vector3<f64>>,
    radius: f64,
}

impl ContactSet {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self, PhysicsError> {
        Self::with_radius(points, DEFAULT_CONTACT_RADIUS)
    }

    pub fn with_radius(points: Vec<Vector3<f64>>, radius: f64) -> Result<Self, PhysicsError> {
        if points.is_empty() {
            return Err(PhysicsError::NoContacts);
        }
        for (index, p) in points.iter().enumerate() {
            if !p.iter().all(|x| x.is_finite()) {
                return Err(PhysicsError::NonFiniteState("contact point"));
            }
            let distance = p.norm();
            if distance > radius {
                return Err(PhysicsError::ContactOutOfBounds { index, distance, radius });
            }
        }
        Ok(Self { points, radius })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Coordinates as a flat `[c0x, c0y, c0z, c1x, ...]` list.
    pub fn flatten(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn from_flat(flat: &[f64], radius: f64) -> Result<Self, PhysicsError> {
        Self::with_radius(flat.chunks_exact(3).map(Vector3::from_column_slice).collect(), radius)
    }
}

/// Per-contact world-frame forces, constant over one frame interval.
#[derive(Debug, Clone, PartialEq)]
pub struct ForceSet {
    forces: Vec<Vector3<f64>>,
}

impl ForceSet {
    pub fn new(forces: Vec<Vector3<f64>>) -> Result<Self, PhysicsError> {
        Self::with_bound(forces, DEFAULT_FORCE_BOUND)
    }

    pub fn with_bound(forces: Vec<Vector3<f64>>, bound: f64) -> Result<Self, PhysicsError> {
        for (index, f) in forces.iter().enumerate() {
            for (component, &value) in f.iter().enumerate() {
                if !value.is_finite() {
                    return Err(PhysicsError::NonFiniteState("force"));
                }
                if value.abs() > bound {
                    return Err(PhysicsError::ForceOutOfBounds { index, component, value, bound });
                }
            }
        }
        Ok(Self { forces })
    }

    pub fn zeros(k: usize) -> Self {
        Self { forces: vec![Vector3::zeros(); k] }
    }

    pub fn forces(&self) -> &[Vector3<f64>] {
        &self.forces
    }

    pub fn len(&self) -> usize {
        self.forces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forces.is_empty()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.forces.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub(crate) fn from_flat_unbounded(flat: &[f64]) -> Self {
        Self { forces: flat.chunks_exact(3).map(Vector3::from_column_slice).collect() }
    }
}

/// A named object-frame landmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub name: String,
    #[serde(with = "serde_util::vec3")]
    pub position: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectModel {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub mass: f64,
    #[serde(with = "serde_util::mat3")]
    pub inertia_body: Matrix3<f64>,
    pub keypoints: Vec<Keypoint>,
}

impl ObjectModel {
    /// Validates mass, inertia symmetry and positive definiteness.
    pub fn new(
        mass: f64,
        inertia_body: Matrix3<f64>,
        keypoints: Vec<Keypoint>,
    ) -> Result<Self, PhysicsError> {
        let model = Self { name: None, mass, inertia_body, keypoints };
        model.validate()?;
        Ok(model)
    }

    /// Solid box of the given full side lengths.
    pub fn box_inertia(mass: f64, extents: Vector3<f64>) -> Matrix3<f64> {
        let (a2, b2, c2) = (extents.x.powi(2), extents.y.powi(2), extents.z.powi(2));
        Matrix3::from_diagonal(&Vector3::new(b2 + c2, a2 + c2, a2 + b2)) * (mass / 12.0)
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        if !(self.mass.is_finite() && self.mass > 0.0) {
            return Err(PhysicsError::InvalidModel(format!("mass must be positive, got {}", self.mass)));
        }
        let i = &self.inertia_body;
        if !i.iter().all(|x| x.is_finite()) {
            return Err(PhysicsError::InvalidModel("inertia has non-finite entries".into()));
        }
        let asym = (i - i.transpose()).amax();
        if asym > 1e-9 * i.amax().max(1e-300) {
            return Err(PhysicsError::InvalidModel("inertia is not symmetric".into()));
        }
        if i.cholesky().is_none() {
            return Err(PhysicsError::InvalidModel("inertia is not positive definite".into()));
        }
        if self.keypoints.iter().any(|k| !k.position.iter().all(|x| x.is_finite())) {
            return Err(PhysicsError::InvalidModel("keypoint has non-finite coordinates".into()));
        }
        Ok(())
    }

    pub fn keypoint_positions(&self) -> Vec<Vector3<f64>> {
        self.keypoints.iter().map(|k| k.position).collect()
    }

    fn inertia_body_inverse(&self) -> Matrix3<f64> {
        // validated SPD, so the inverse exists
        self.inertia_body.try_inverse().unwrap_or_else(Matrix3::zeros)
    }
}

/// Position update used inside a substep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LinearScheme {
    /// `p += h·(v_old + v_new)/2`
    #[default]
    ConstantAcceleration,
    /// `p += h·v_new`
    SemiImplicitEuler,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    #[serde(with = "serde_util::vec3")]
    pub gravity: Vector3<f64>,
    pub frame_dt: f64,
    pub substeps_per_frame: usize,
    #[serde(default)]
    pub linear_scheme: LinearScheme,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            gravity: Vector3::new(0.0, 0.0, -STANDARD_GRAVITY),
            frame_dt: DEFAULT_FRAME_DT,
            substeps_per_frame: DEFAULT_SUBSTEPS,
            linear_scheme: LinearScheme::ConstantAcceleration,
        }
    }
}

impl SimulationConfig {
    pub fn zero_gravity() -> Self {
        Self { gravity: Vector3::zeros(), ..Self::default() }
    }

    pub fn substep_dt(&self) -> f64 {
        self.frame_dt / self.substeps_per_frame as f64
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        if !(self.frame_dt.is_finite() && self.frame_dt > 0.0) {
            return Err(PhysicsError::InvalidConfig(format!("frame_dt must be positive, got {}", self.frame_dt)));
        }
        if self.substeps_per_frame == 0 {
            return Err(PhysicsError::InvalidConfig("substeps_per_frame must be at least 1".into()));
        }
        if !self.gravity.iter().all(|x| x.is_finite()) {
            return Err(PhysicsError::InvalidConfig("gravity is not finite".into()));
        }
        Ok(())
    }
}

/// Net applied force and torque about the center of mass. Gravity is not
/// included.
pub fn net_wrench(
    state: &RigidBodyState,
    forces: &ForceSet,
    contacts: &ContactSet,
) -> Result<(Vector3<f64>, Vector3<f64>), PhysicsError> {
    check_pairing(forces, contacts)?;
    Ok(wrench_unchecked(&state.orientation, forces, contacts))
}

fn wrench_unchecked(
    orientation: &UnitQuaternion<f64>,
    forces: &ForceSet,
    contacts: &ContactSet,
) -> (Vector3<f64>, Vector3<f64>) {
    let mut force = Vector3::zeros();
    let mut torque = Vector3::zeros();
    for (f, c) in forces.forces.iter().zip(&contacts.points) {
        force += f;
        torque += (orientation * c).cross(f);
    }
    (force, torque)
}

fn check_pairing(forces: &ForceSet, contacts: &ContactSet) -> Result<(), PhysicsError> {
    if forces.len() != contacts.len() {
        return Err(PhysicsError::ContactForceMismatch {
            contacts: contacts.len(),
            forces: forces.len(),
        });
    }
    Ok(())
}

/// Advances the body by one frame interval.
pub fn step(
    state: &RigidBodyState,
    forces: &ForceSet,
    contacts: &ContactSet,
    model: &ObjectModel,
    cfg: &SimulationConfig,
) -> Result<RigidBodyState, PhysicsError> {
    check_pairing(forces, contacts)?;
    if !state.is_finite() {
        return Err(PhysicsError::NonFiniteState("state"));
    }
    if !forces.forces.iter().all(|f| f.iter().all(|x| x.is_finite())) {
        return Err(PhysicsError::NonFiniteState("force"));
    }
    cfg.validate()?;

    let h = cfg.substep_dt();
    let inv_mass = 1.0 / model.mass;
    let inertia_inv = model.inertia_body_inverse();
    let total_force: Vector3<f64> = forces.forces.iter().sum();
    let linear_acc = total_force * inv_mass + cfg.gravity;

    let mut s = *state;
    for _ in 0..cfg.substeps_per_frame {
        let rot = s.orientation.to_rotation_matrix();
        let r = rot.matrix();
        let (_, torque) = wrench_unchecked(&s.orientation, forces, contacts);

        let v_old = s.linear_velocity;
        s.linear_velocity += linear_acc * h;

        let inertia_world = r * model.inertia_body * r.transpose();
        let momentum = inertia_world * s.angular_velocity + torque * h;
        let omega_mid = r * inertia_inv * r.transpose() * momentum;

        s.position += match cfg.linear_scheme {
            LinearScheme::ConstantAcceleration => (v_old + s.linear_velocity) * (0.5 * h),
            LinearScheme::SemiImplicitEuler => s.linear_velocity * h,
        };
        let delta = UnitQuaternion::from_scaled_axis(omega_mid * h);
        s.orientation = UnitQuaternion::new_normalize((delta * s.orientation).into_inner());

        let r_next = s.orientation.to_rotation_matrix();
        let r_next = r_next.matrix();
        s.angular_velocity = r_next * inertia_inv * r_next.transpose() * momentum;
    }

    if !s.is_finite() {
        return Err(PhysicsError::NonFiniteState("integrated state"));
    }
    Ok(s)
}

/// Rolls the body forward under a force sequence. Returns `n + 1` states,
/// starting with `s0`.
pub fn simulate_trajectory(
    s0: &RigidBodyState,
    force_seq: &[ForceSet],
    contacts: &ContactSet,
    model: &ObjectModel,
    cfg: &SimulationConfig,
) -> Result<Vec<RigidBodyState>, PhysicsError> {
    let mut states = Vec::with_capacity(force_seq.len() + 1);
    states.push(*s0);
    let mut current = *s0;
    for (frame, forces) in force_seq.iter().enumerate() {
        current = step(&current, forces, contacts, model, cfg).map_err(|e| e.at_frame(frame))?;
        states.push(current);
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_model(inertia: f64) -> ObjectModel {
        ObjectModel::new(1.0, Matrix3::identity() * inertia, vec![]).unwrap()
    }

    fn one_substep() -> SimulationConfig {
        SimulationConfig { substeps_per_frame: 1, ..SimulationConfig::default() }
    }

    #[test]
    fn zero_everything_is_a_fixed_point() {
        let s = RigidBodyState::at_rest(
            Vector3::new(0.3, -0.2, 1.0),
            UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3),
        );
        let contacts = ContactSet::new(vec![Vector3::new(0.1, 0.0, 0.0)]).unwrap();
        let out = step(&s, &ForceSet::zeros(1), &contacts, &unit_model(0.01), &SimulationConfig::zero_gravity())
            .unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn one_gravity_substep() {
        let contacts = ContactSet::new(vec![Vector3::zeros()]).unwrap();
        let run = |linear_scheme| {
            let cfg = SimulationConfig { linear_scheme, ..one_substep() };
            step(&RigidBodyState::default(), &ForceSet::zeros(1), &contacts, &unit_model(0.01), &cfg).unwrap()
        };
        let out = run(LinearScheme::SemiImplicitEuler);
        assert_relative_eq!(out.linear_velocity, Vector3::new(0.0, 0.0, -0.327), epsilon = 1e-12);
        assert_relative_eq!(out.position, Vector3::new(0.0, 0.0, -0.0109), epsilon = 1e-12);

        let out = run(LinearScheme::ConstantAcceleration);
        assert_relative_eq!(out.linear_velocity, Vector3::new(0.0, 0.0, -0.327), epsilon = 1e-12);
        assert_relative_eq!(out.position, Vector3::new(0.0, 0.0, -0.00545), epsilon = 1e-12);
    }

    #[test]
    fn offset_force_spins_about_negative_y() {
        // Hand-rolled single substep: ω = h·I⁻¹·(c × f) with c=(0.1,0,0), f=(0,0,1).
        let h = 1.0 / 30.0;
        let torque = Vector3::new(0.1, 0.0, 0.0).cross(&Vector3::new(0.0, 0.0, 1.0));
        let expected_omega = torque * h / 0.01;
        let expected_v = Vector3::new(0.0, 0.0, h);
        let expected_p = expected_v * (h / 2.0);

        let contacts = ContactSet::new(vec![Vector3::new(0.1, 0.0, 0.0)]).unwrap();
        let forces = ForceSet::new(vec![Vector3::new(0.0, 0.0, 1.0)]).unwrap();
        let cfg = SimulationConfig { gravity: Vector3::zeros(), ..one_substep() };
        let out = step(&RigidBodyState::default(), &forces, &contacts, &unit_model(0.01), &cfg).unwrap();

        assert!(out.angular_velocity.y < 0.0);
        assert_relative_eq!(out.angular_velocity, expected_omega, epsilon = 1e-12);
        assert_relative_eq!(out.linear_velocity, expected_v, epsilon = 1e-15);
        assert_relative_eq!(out.position, expected_p, epsilon = 1e-15);
        let expected_q = UnitQuaternion::from_scaled_axis(expected_omega * h);
        assert!(out.orientation.angle_to(&expected_q) < 1e-12);
    }

    #[test]
    fn wrench_of_single_offset_force() {
        let contacts = ContactSet::new(vec![Vector3::new(0.1, 0.0, 0.0)]).unwrap();
        let forces = ForceSet::new(vec![Vector3::new(0.0, 0.0, 1.0)]).unwrap();
        let (f, t) = net_wrench(&RigidBodyState::default(), &forces, &contacts).unwrap();
        assert_eq!(f, Vector3::new(0.0, 0.0, 1.0));
        assert_relative_eq!(t, Vector3::new(0.0, -0.1, 0.0), epsilon = 1e-15);

        let (f, t) = net_wrench(&RigidBodyState::default(), &ForceSet::zeros(1), &contacts).unwrap();
        assert_eq!((f, t), (Vector3::zeros(), Vector3::zeros()));
    }

    #[test]
    fn couple_has_zero_net_force() {
        let state = RigidBodyState::at_rest(Vector3::zeros(), UnitQuaternion::from_euler_angles(0.4, -0.3, 1.1));
        let c = Vector3::new(0.05, 0.02, -0.03);
        let f = Vector3::new(1.0, -2.0, 0.5);
        let contacts = ContactSet::new(vec![c, -c]).unwrap();
        let forces = ForceSet::new(vec![f, -f]).unwrap();
        let (net_f, net_t) = net_wrench(&state, &forces, &contacts).unwrap();

        // direct summation with an explicit rotation matrix
        let r = state.orientation.to_rotation_matrix().into_inner();
        let mut torque = [0.0; 3];
        for (ci, fi) in [(c, f), (-c, -f)] {
            let w = r * ci;
            torque[0] += w[1] * fi[2] - w[2] * fi[1];
            torque[1] += w[2] * fi[0] - w[0] * fi[2];
            torque[2] += w[0] * fi[1] - w[1] * fi[0];
        }
        assert_eq!(net_f, Vector3::zeros());
        assert!(net_t.norm() > 0.1);
        assert_relative_eq!(net_t, Vector3::from(torque), epsilon = 1e-14);
    }

    #[test]
    fn mismatched_k_is_rejected() {
        let contacts = ContactSet::new(vec![Vector3::zeros(); 2]).unwrap();
        let err = step(
            &RigidBodyState::default(),
            &ForceSet::zeros(3),
            &contacts,
            &unit_model(1.0),
            &SimulationConfig::default(),
        )
        .unwrap_err();
        assert_eq!(err.code(), "contact_force_mismatch");
        let err = net_wrench(&RigidBodyState::default(), &ForceSet::zeros(3), &contacts).unwrap_err();
        assert_eq!(err.code(), "contact_force_mismatch");
    }

    #[test]
    fn non_finite_state_is_rejected() {
        let mut s = RigidBodyState::default();
        s.linear_velocity.x = f64::NAN;
        let contacts = ContactSet::new(vec![Vector3::zeros()]).unwrap();
        let err = step(&s, &ForceSet::zeros(1), &contacts, &unit_model(1.0), &SimulationConfig::default())
            .unwrap_err();
        assert_eq!(err.code(), "non_finite_state");
    }

    #[test]
    fn trajectory_errors_carry_the_frame() {
        let contacts = ContactSet::new(vec![Vector3::zeros()]).unwrap();
        let seq = vec![ForceSet::zeros(1), ForceSet::zeros(2)];
        let err = simulate_trajectory(
            &RigidBodyState::default(),
            &seq,
            &contacts,
            &unit_model(1.0),
            &SimulationConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, PhysicsError::AtFrame { frame: 1, .. }));
        assert_eq!(err.code(), "contact_force_mismatch");
    }

    #[test]
    fn contact_radius_and_force_bound() {
        assert_eq!(
            ContactSet::new(vec![Vector3::new(2.0, 0.0, 0.0)]).unwrap_err().code(),
            "contact_out_of_bounds"
        );
        assert!(ContactSet::with_radius(vec![Vector3::new(2.0, 0.0, 0.0)], 3.0).is_ok());
        assert_eq!(
            ForceSet::new(vec![Vector3::new(0.0, 101.0, 0.0)]).unwrap_err().code(),
            "force_out_of_bounds"
        );
        assert_eq!(ContactSet::new(vec![]).unwrap_err().code(), "no_contacts");
    }

    #[test]
    fn model_validation() {
        assert!(ObjectModel::new(0.0, Matrix3::identity(), vec![]).is_err());
        let mut skew = Matrix3::identity();
        skew[(0, 1)] = 0.5;
        assert!(ObjectModel::new(1.0, skew, vec![]).is_err());
        assert!(ObjectModel::new(1.0, -Matrix3::identity(), vec![]).is_err());
    }

    #[test]
    fn state_vector_round_trip() {
        let s = RigidBodyState {
            position: Vector3::new(1.0, 2.0, 3.0),
            orientation: UnitQuaternion::from_euler_angles(0.3, 0.2, 0.1),
            linear_velocity: Vector3::new(-1.0, 0.5, 0.25),
            angular_velocity: Vector3::new(0.1, 0.2, 0.3),
        };
        let v = s.to_vector();
        assert_eq!(v.len(), STATE_DIM);
        let back = RigidBodyState::from_vector(&v).unwrap();
        assert_relative_eq!(back.to_vector(), v, epsilon = 1e-15);
    }
}
