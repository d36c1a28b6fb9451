//! Finite-difference Jacobians of the simulator step.
//!
//! The simulator is treated as a black box: every column of the Jacobian is
//! obtained by perturbing one input coordinate and re-running [`Simulator::step`].
//! Inputs are the 13 state coordinates, the `3k` force coordinates and the
//! `3k` contact coordinates, so a central scheme costs `2·(13 + 6k)` calls and
//! a forward scheme `(13 + 6k) + 1`.

use nalgebra::{
    DMatrix, DVector, Matrix2x3, Matrix3, Matrix3x4, Matrix4, SMatrix, Vector2, Vector4,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::physics::{
    self, ContactSet, ForceSet, ObjectModel, PhysicsError, RigidBodyState, SimulationConfig,
    StateVector, STATE_DIM,
};
use crate::projection::{check_keypoint_count, Camera, FrameObservation, Pose, ProjectionError};

pub type StateJacobian = SMatrix<f64, STATE_DIM, STATE_DIM>;

pub const DEFAULT_H_STATE: f64 = 0.01;
pub const DEFAULT_H_FORCE: f64 = 0.01;
pub const DEFAULT_H_CONTACT: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FdError {
    #[error("probe on input coordinate {coordinate} failed: {source}")]
    ProbeFailed {
        coordinate: usize,
        #[source]
        source: PhysicsError,
    },
    #[error("non-finite difference quotient for input coordinate {coordinate}")]
    NonFinite { coordinate: usize },
    #[error("nominal step failed: {0}")]
    Nominal(#[source] PhysicsError),
    #[error("invalid finite-difference config: {0}")]
    InvalidConfig(String),
}

impl FdError {
    pub fn code(&self) -> &'static str {
        match self {
            FdError::ProbeFailed { .. } => "fd_probe_failed",
            FdError::NonFinite { .. } => "fd_non_finite",
            FdError::Nominal(e) => e.code(),
            FdError::InvalidConfig(_) => "invalid_fd_config",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FdScheme {
    #[default]
    Central,
    Forward,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdConfig {
    pub h_state: f64,
    pub h_force: f64,
    pub h_contact: f64,
    pub scheme: FdScheme,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            h_state: DEFAULT_H_STATE,
            h_force: DEFAULT_H_FORCE,
            h_contact: DEFAULT_H_CONTACT,
            scheme: FdScheme::Central,
        }
    }
}

impl FdConfig {
    pub fn forward() -> Self {
        Self { scheme: FdScheme::Forward, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), FdError> {
        for (name, h) in [("h_state", self.h_state), ("h_force", self.h_force), ("h_contact", self.h_contact)] {
            if !(h.is_finite() && h > 0.0) {
                return Err(FdError::InvalidConfig(format!("{name} must be positive, got {h}")));
            }
        }
        Ok(())
    }

    /// Simulator calls needed for one full Jacobian with `k` contacts.
    pub fn call_count(&self, k: usize) -> usize {
        let inputs = STATE_DIM + 6 * k;
        match self.scheme {
            FdScheme::Central => 2 * inputs,
            FdScheme::Forward => inputs + 1,
        }
    }
}

/// One frame of forward dynamics, seen as a black box.
pub trait Simulator: Sync {
    fn step(
        &self,
        state: &RigidBodyState,
        forces: &ForceSet,
        contacts: &ContactSet,
    ) -> Result<RigidBodyState, PhysicsError>;
}

/// The rigid-body simulator from [`physics`].
#[derive(Debug, Clone, Copy)]
pub struct RigidBodySimulator<'a> {
    pub model: &'a ObjectModel,
    pub cfg: &'a SimulationConfig,
}

impl<'a> RigidBodySimulator<'a> {
    pub fn new(model: &'a ObjectModel, cfg: &'a SimulationConfig) -> Self {
        Self { model, cfg }
    }
}

impl Simulator for RigidBodySimulator<'_> {
    fn step(
        &self,
        state: &RigidBodyState,
        forces: &ForceSet,
        contacts: &ContactSet,
    ) -> Result<RigidBodyState, PhysicsError> {
        physics::step(state, forces, contacts, self.model, self.cfg)
    }
}

/// `∂s_{t+1}/∂s_t`, `∂s_{t+1}/∂f_t` and `∂s_{t+1}/∂C_t`. Force and contact
/// columns are ordered contact-major: column `3i + a` is axis `a` of contact `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepJacobians {
    pub d_state: StateJacobian,
    pub d_force: DMatrix<f64>,
    pub d_contact: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy)]
enum Block {
    State,
    Force,
    Contact,
}

/// Which input blocks to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Blocks {
    pub state: bool,
    pub force: bool,
    pub contact: bool,
}

impl Blocks {
    pub const ALL: Blocks = Blocks { state: true, force: true, contact: true };
}

pub(crate) struct PartialJacobians {
    pub d_state: Option<StateJacobian>,
    pub d_force: Option<DMatrix<f64>>,
    pub d_contact: Option<DMatrix<f64>>,
}

/// Full step Jacobians with the rigid-body simulator.
pub fn step_jacobians(
    state: &RigidBodyState,
    forces: &ForceSet,
    contacts: &ContactSet,
    model: &ObjectModel,
    cfg: &SimulationConfig,
    fd: &FdConfig,
) -> Result<StepJacobians, FdError> {
    step_jacobians_with(&RigidBodySimulator::new(model, cfg), state, forces, contacts, fd)
}

/// Full step Jacobians through an arbitrary simulator.
pub fn step_jacobians_with<S: Simulator + ?Sized>(
    sim: &S,
    state: &RigidBodyState,
    forces: &ForceSet,
    contacts: &ContactSet,
    fd: &FdConfig,
) -> Result<StepJacobians, FdError> {
    let p = partial_jacobians(sim, state, forces, contacts, fd, Blocks::ALL)?;
    Ok(StepJacobians {
        d_state: p.d_state.expect("state block requested"),
        d_force: p.d_force.expect("force block requested"),
        d_contact: p.d_contact.expect("contact block requested"),
    })
}

pub(crate) fn partial_jacobians<S: Simulator + ?Sized>(
    sim: &S,
    state: &RigidBodyState,
    forces: &ForceSet,
    contacts: &ContactSet,
    fd: &FdConfig,
    blocks: Blocks,
) -> Result<PartialJacobians, FdError> {
    fd.validate()?;
    if forces.len() != contacts.len() {
        return Err(FdError::Nominal(PhysicsError::ContactForceMismatch {
            contacts: contacts.len(),
            forces: forces.len(),
        }));
    }
    let k = contacts.len();

    let nominal = match fd.scheme {
        FdScheme::Forward => Some(sim.step(state, forces, contacts).map_err(FdError::Nominal)?.to_vector()),
        FdScheme::Central => None,
    };

    let state_vec = state.to_vector();
    let force_flat = forces.flatten();
    let contact_flat = contacts.flatten();

    let probe = |block: Block, j: usize, delta: f64| -> Result<StateVector, PhysicsError> {
        match block {
            Block::State => {
                let mut x = state_vec;
                x[j] += delta;
                let s = RigidBodyState::from_vector(&x)?;
                Ok(sim.step(&s, forces, contacts)?.to_vector())
            }
            Block::Force => {
                let mut x = force_flat.clone();
                x[j] += delta;
                let f = ForceSet::from_flat_unbounded(&x);
                Ok(sim.step(state, &f, contacts)?.to_vector())
            }
            Block::Contact => {
                let mut x = contact_flat.clone();
                x[j] += delta;
                let c = ContactSet::from_flat(&x, contacts.radius())?;
                Ok(sim.step(state, forces, &c)?.to_vector())
            }
        }
    };

    let column = |block: Block, j: usize, offset: usize, h: f64| -> Result<StateVector, FdError> {
        let coordinate = offset + j;
        let failed = |source| FdError::ProbeFailed { coordinate, source };
        let col = match &nominal {
            None => {
                let plus = probe(block, j, h).map_err(failed)?;
                let minus = probe(block, j, -h).map_err(failed)?;
                (plus - minus) / (2.0 * h)
            }
            Some(base) => {
                let plus = probe(block, j, h).map_err(failed)?;
                (plus - base) / h
            }
        };
        if !col.iter().all(|x| x.is_finite()) {
            return Err(FdError::NonFinite { coordinate });
        }
        Ok(col)
    };

    let d_state = if blocks.state {
        let mut m = StateJacobian::zeros();
        for j in 0..STATE_DIM {
            m.set_column(j, &column(Block::State, j, 0, fd.h_state)?);
        }
        Some(m)
    } else {
        None
    };
    let d_force = if blocks.force {
        let mut m = DMatrix::zeros(STATE_DIM, 3 * k);
        for j in 0..3 * k {
            m.set_column(j, &column(Block::Force, j, STATE_DIM, fd.h_force)?);
        }
        Some(m)
    } else {
        None
    };
    let d_contact = if blocks.contact {
        let mut m = DMatrix::zeros(STATE_DIM, 3 * k);
        for j in 0..3 * k {
            m.set_column(j, &column(Block::Contact, j, STATE_DIM + 3 * k, fd.h_contact)?);
        }
        Some(m)
    } else {
        None
    };
    Ok(PartialJacobians { d_state, d_force, d_contact })
}

/// Pixel residuals of the visible keypoints, stacked as `(u, v)` pairs in
/// keypoint order, with their Jacobian with respect to the 13 state
/// coordinates. Velocity columns are zero. The quaternion columns are
/// projected onto the tangent space of the unit sphere.
pub fn keypoint_residual_jacobian(
    obs: &FrameObservation,
    state: &RigidBodyState,
    model: &ObjectModel,
    camera: &Camera,
) -> Result<(DVector<f64>, DMatrix<f64>), ProjectionError> {
    check_keypoint_count(obs, model)?;
    let m = obs.visible_count();
    if m == 0 {
        return Err(ProjectionError::NoVisibleKeypoints { frame: obs.t });
    }
    let q = state.orientation.quaternion();
    let (w, v) = (q.w, q.imag());
    let q_vec = Vector4::new(w, v.x, v.y, v.z);
    let tangent = Matrix4::identity() - q_vec * q_vec.transpose();
    let pose = Pose::from(state);
    let r_cam = camera.extrinsic.rotation.to_rotation_matrix().into_inner();

    let mut res = DVector::zeros(2 * m);
    let mut jac = DMatrix::zeros(2 * m, STATE_DIM);
    for (row, (i, target)) in obs.visible_keypoints().enumerate() {
        let x = model.keypoints[i].position;
        let pc = camera.world_to_camera(&pose.transform_point(&x));
        if !(pc.z > 0.0) {
            return Err(ProjectionError::BehindCamera { index: i, depth: pc.z });
        }
        let inv_z = 1.0 / pc.z;
        let px = Vector2::new(camera.fx * pc.x * inv_z + camera.cx, camera.fy * pc.y * inv_z + camera.cy);
        res.fixed_rows_mut::<2>(2 * row).copy_from(&(px - target));

        let d_cam = Matrix2x3::new(
            camera.fx * inv_z,
            0.0,
            -camera.fx * pc.x * inv_z * inv_z,
            0.0,
            camera.fy * inv_z,
            -camera.fy * pc.y * inv_z * inv_z,
        );
        let d_world = d_cam * r_cam;
        // R(q)x = (w² − v·v)x + 2(v·x)v + 2w(v × x)
        let d_w = 2.0 * w * x + 2.0 * v.cross(&x);
        let d_v = -2.0 * x * v.transpose()
            + 2.0 * (v * x.transpose() + Matrix3::identity() * v.dot(&x))
            - 2.0 * w * x.cross_matrix();
        let mut d_q = Matrix3x4::zeros();
        d_q.set_column(0, &d_w);
        d_q.fixed_view_mut::<3, 3>(0, 1).copy_from(&d_v);

        jac.fixed_view_mut::<2, 3>(2 * row, 0).copy_from(&d_world);
        jac.fixed_view_mut::<2, 4>(2 * row, 3).copy_from(&(d_world * d_q * tangent));
    }
    Ok((res, jac))
}

/// Closed-form gradient of the keypoint loss with respect to the 13 state
/// coordinates, `2·Jᵀr` with `J` and `r` from [`keypoint_residual_jacobian`].
pub fn loss_gradient_single_frame(
    obs: &FrameObservation,
    state: &RigidBodyState,
    model: &ObjectModel,
    camera: &Camera,
) -> Result<StateVector, ProjectionError> {
    let (r, j) = keypoint_residual_jacobian(obs, state, model, camera)?;
    let g = j.tr_mul(&r) * 2.0;
    Ok(StateVector::from_iterator(g.iter().copied()))
}
