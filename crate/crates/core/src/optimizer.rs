//! Force-sequence recovery from keypoint tracks.
//!
//! The default rule is damped Gauss-Newton on the stacked keypoint
//! residuals. Residual Jacobians are chained forward through
//! finite-difference step Jacobians. The solve grows the horizon one frame
//! at a time: each new frame starts from the force of the frame before it,
//! and a few iterations are spent on every prefix before the full problem.
//!
//! The adaptive rule descends on gradients from reverse accumulation
//! through time,
//!
//! ```text
//! a_n = ∂L_n/∂s_n
//! a_t = ∂L_t/∂s_t + (∂s_{t+1}/∂s_t)ᵀ a_{t+1}
//! ∂L/∂f_t = (∂s_{t+1}/∂f_t)ᵀ a_{t+1}
//! ```

use nalgebra::{DMatrix, DVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::finite_diff::{
    keypoint_residual_jacobian, loss_gradient_single_frame, partial_jacobians, Blocks, FdConfig, FdError, RigidBodySimulator,
};
use crate::physics::{
    self, ContactSet, ForceSet, ObjectModel, PhysicsError, RigidBodyState, SimulationConfig,
    StateVector, DEFAULT_FORCE_BOUND,
};
use crate::projection::{keypoint_loss, Camera, FrameObservation, Pose, ProjectionError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizerError {
    #[error("{observations} observations for {forces} force frames")]
    LengthMismatch { observations: usize, forces: usize },
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error("frame {frame}: {source}")]
    Projection {
        frame: usize,
        #[source]
        source: ProjectionError,
    },
    #[error("frame {frame}: {source}")]
    Jacobian {
        frame: usize,
        #[source]
        source: FdError,
    },
    #[error("loss became non-finite at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("total loss cannot be evaluated at the zero-force start: {0}")]
    InfeasibleScenario(Box<OptimizerError>),
    #[error("invalid optimizer options: {0}")]
    InvalidOptions(String),
}

impl OptimizerError {
    pub fn code(&self) -> &'static str {
        match self {
            OptimizerError::LengthMismatch { .. } => "sequence_mismatch",
            OptimizerError::Physics(e) => e.code(),
            OptimizerError::Projection { source, .. } => source.code(),
            OptimizerError::Jacobian { source, .. } => source.code(),
            OptimizerError::Diverged { .. } => "diverged",
            OptimizerError::InfeasibleScenario(_) => "infeasible_scenario",
            OptimizerError::InvalidOptions(_) => "invalid_options",
        }
    }
}

/// Everything needed to score a force sequence except the forces and the
/// contact points. `observations[t]` annotates the state after force frame `t`.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryProblem<'a> {
    pub s0: RigidBodyState,
    pub model: &'a ObjectModel,
    pub sim: &'a SimulationConfig,
    pub camera: &'a Camera,
    pub observations: &'a [FrameObservation],
}

impl TrajectoryProblem<'_> {
    pub fn frames(&self) -> usize {
        self.observations.len()
    }

    fn check_len(&self, force_seq: &[ForceSet]) -> Result<(), OptimizerError> {
        if force_seq.len() != self.observations.len() || force_seq.is_empty() {
            return Err(OptimizerError::LengthMismatch {
                observations: self.observations.len(),
                forces: force_seq.len(),
            });
        }
        Ok(())
    }

    fn rollout(
        &self,
        force_seq: &[ForceSet],
        contacts: &ContactSet,
    ) -> Result<Vec<RigidBodyState>, OptimizerError> {
        self.check_len(force_seq)?;
        Ok(physics::simulate_trajectory(&self.s0, force_seq, contacts, self.model, self.sim)?)
    }

    fn loss_of_states(&self, states: &[RigidBodyState]) -> Result<f64, OptimizerError> {
        let mut total = 0.0;
        for (t, obs) in self.observations.iter().enumerate() {
            total += keypoint_loss(obs, &states[t + 1], self.model, self.camera)
                .map_err(|source| OptimizerError::Projection { frame: t + 1, source })?;
        }
        Ok(total)
    }
}

/// Sum of per-frame keypoint losses over frames `1..=n` of the rollout.
pub fn total_loss(
    problem: &TrajectoryProblem<'_>,
    force_seq: &[ForceSet],
    contacts: &ContactSet,
) -> Result<f64, OptimizerError> {
    let states = problem.rollout(force_seq, contacts)?;
    problem.loss_of_states(&states)
}

/// Total loss together with its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub loss: f64,
    pub states: Vec<RigidBodyState>,
    /// One `k`-long list of per-contact force gradients per frame (px²/N).
    pub forces: Vec<Vec<Vector3<f64>>>,
    /// Gradient with respect to the shared contact points (px²/m), when requested.
    pub contacts: Option<Vec<Vector3<f64>>>,
}

/// Gradients of the total loss with respect to every force coordinate.
pub fn loss_gradients(
    problem: &TrajectoryProblem<'_>,
    force_seq: &[ForceSet],
    contacts: &ContactSet,
    fd: &FdConfig,
) -> Result<Vec<Vec<Vector3<f64>>>, OptimizerError> {
    Ok(evaluate_with_gradients(problem, force_seq, contacts, fd, false)?.forces)
}

/// Loss, rollout and gradients in one pass. With `with_contacts`, the
/// gradient with respect to the contact points is accumulated as well.
pub fn evaluate_with_gradients(
    problem: &TrajectoryProblem<'_>,
    force_seq: &[ForceSet],
    contacts: &ContactSet,
    fd: &FdConfig,
    with_contacts: bool,
) -> Result<LossGradients, OptimizerError> {
    let states = problem.rollout(force_seq, contacts)?;
    let loss = problem.loss_of_states(&states)?;
    let n = force_seq.len();
    let k = contacts.len();

    let frame_grads = problem
        .observations
        .iter()
        .enumerate()
        .map(|(t, obs)| {
            loss_gradient_single_frame(obs, &states[t + 1], problem.model, problem.camera)
                .map_err(|source| OptimizerError::Projection { frame: t + 1, source })
        })
        .collect::<Result<Vec<StateVector>, _>>()?;

    let sim = RigidBodySimulator::new(problem.model, problem.sim);
    let jacobians: Vec<_> = (0..n)
        .into_par_iter()
        .map(|t| {
            // the initial state is fixed, so frame 0 needs no state block
            let blocks = Blocks { state: t > 0, force: true, contact: with_contacts };
            partial_jacobians(&sim, &states[t], &force_seq[t], contacts, fd, blocks)
                .map_err(|source| OptimizerError::Jacobian { frame: t, source })
        })
        .collect();
    let jacobians = jacobians.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut force_grads = vec![Vec::new(); n];
    let mut contact_grad = DVector::<f64>::zeros(3 * k);
    // adjoint of s_{t+1}
    let mut adjoint = frame_grads[n - 1];
    for t in (0..n).rev() {
        let jac = &jacobians[t];
        let d_force = jac.d_force.as_ref().expect("force block requested");
        let g = d_force.tr_mul(&adjoint);
        force_grads[t] = g.as_slice().chunks_exact(3).map(Vector3::from_column_slice).collect();
        if let Some(d_contact) = &jac.d_contact {
            contact_grad += d_contact.tr_mul(&adjoint);
        }
        if t > 0 {
            let d_state = jac.d_state.as_ref().expect("state block requested");
            adjoint = frame_grads[t - 1] + d_state.tr_mul(&adjoint);
        }
    }

    Ok(LossGradients {
        loss,
        states,
        forces: force_grads,
        contacts: with_contacts
            .then(|| contact_grad.as_slice().chunks_exact(3).map(Vector3::from_column_slice).collect()),
    })
}

/// How each iterate is obtained from the previous one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    /// Damped Gauss-Newton on the stacked keypoint residuals, with the
    /// residual Jacobian chained forward through the step Jacobians.
    #[default]
    GaussNewton,
    /// Clipped gradient steps with per-coordinate first/second-moment
    /// scaling.
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerOptions {
    pub step_rule: StepRule,
    pub max_iterations: usize,
    /// Starting damping of the Gauss-Newton rule, relative to the diagonal
    /// of the normal equations. Raised ×10 after a rejected step and
    /// lowered ×0.1 after an accepted one.
    pub initial_damping: f64,
    /// Gauss-Newton iterations spent on each shortened horizon before the
    /// full problem is solved. Zero starts the full solve from zero forces.
    pub warm_start_iterations: usize,
    /// Base step of the per-coordinate adaptive rule, in newtons.
    pub initial_rate: f64,
    /// Stop when the best loss improves by less than this fraction over
    /// `convergence_window` iterations.
    pub convergence_tol: f64,
    pub convergence_window: usize,
    /// Stop immediately once the loss is at or below this value (px²).
    pub absolute_tol: f64,
    pub force_bound: f64,
    pub gradient_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Multiplier applied to the rate after an iterate fails to improve on
    /// the best loss for `patience` iterations.
    pub rate_decay: f64,
    pub patience: usize,
    pub seed: u64,
    /// Also descend on the contact points through `∂s/∂C`.
    pub refine_contacts: bool,
    /// Base step for contact refinement, in meters.
    pub contact_rate: f64,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            step_rule: StepRule::GaussNewton,
            max_iterations: 500,
            initial_damping: 1e-3,
            warm_start_iterations: 10,
            initial_rate: 0.1,
            convergence_tol: 1e-6,
            convergence_window: 10,
            absolute_tol: 1e-10,
            force_bound: DEFAULT_FORCE_BOUND,
            gradient_clip: 1e4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-12,
            rate_decay: 0.5,
            patience: 5,
            seed: 0,
            refine_contacts: false,
            contact_rate: 0.002,
        }
    }
}

impl OptimizerOptions {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        let bad = |m: &str| Err(OptimizerError::InvalidOptions(m.to_string()));
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1");
        }
        for (name, v) in [
            ("initial_rate", self.initial_rate),
            ("force_bound", self.force_bound),
            ("gradient_clip", self.gradient_clip),
            ("contact_rate", self.contact_rate),
            ("initial_damping", self.initial_damping),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(&format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.rate_decay > 0.0 && self.rate_decay <= 1.0) {
            return bad("rate_decay must lie in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub force_seq: Vec<ForceSet>,
    pub contacts: ContactSet,
    /// Rollout of the returned forces, `n + 1` states.
    pub simulated_states: Vec<RigidBodyState>,
    /// Total loss of every evaluated iterate, in order.
    pub loss_history: Vec<f64>,
    /// Mean pixel distance over visible keypoints, frames `1..=n`.
    pub per_frame_kp_error: Vec<f64>,
    pub best_loss: f64,
    pub best_iteration: usize,
    /// Accepted steps, including those spent on shortened horizons.
    pub iterations: usize,
    pub converged: bool,
}

/// Per-coordinate adaptive first-moment/second-moment step.
struct AdaptiveStep {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdaptiveStep {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.t = 0;
    }

    fn apply(&mut self, x: &mut [f64], g: &[f64], rate: f64, opts: &OptimizerOptions) {
        self.t += 1;
        let c1 = 1.0 - opts.beta1.powi(self.t);
        let c2 = 1.0 - opts.beta2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = opts.beta1 * self.m[i] + (1.0 - opts.beta1) * g[i];
            self.v[i] = opts.beta2 * self.v[i] + (1.0 - opts.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            x[i] -= rate * m_hat / (v_hat.sqrt() + opts.epsilon);
        }
    }
}

fn clip(g: &mut [f64], max_norm: f64) {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        g.iter_mut().for_each(|x| *x *= s);
    }
}

fn unflatten(flat: &[f64], n: usize) -> Vec<ForceSet> {
    let per = flat.len() / n;
    flat.chunks_exact(per).map(ForceSet::from_flat_unbounded).collect()
}

/// Mean pixel distance of visible keypoints for each observed frame.
pub fn per_frame_kp_error(
    problem: &TrajectoryProblem<'_>,
    states: &[RigidBodyState],
) -> Result<Vec<f64>, OptimizerError> {
    let kps = problem.model.keypoint_positions();
    problem
        .observations
        .iter()
        .enumerate()
        .map(|(t, obs)| {
            let pose = Pose::from(&states[t + 1]);
            let mut sum = 0.0;
            for (i, target) in obs.visible_keypoints() {
                let px = crate::projection::project_one(i, &kps[i], &pose, problem.camera)
                    .map_err(|source| OptimizerError::Projection { frame: t + 1, source })?;
                sum += (px - target).norm();
            }
            Ok(sum / obs.visible_count().max(1) as f64)
        })
        .collect()
}

/// Recovers a force sequence that reproduces the observed keypoints.
///
/// Starts from zero forces and returns the best iterate seen, with every
/// force coordinate inside the bound. Contacts stay fixed unless
/// `opts.refine_contacts` is set.
pub fn infer_forces(
    problem: &TrajectoryProblem<'_>,
    contacts: &ContactSet,
    opts: &OptimizerOptions,
    fd: &FdConfig,
) -> Result<InferenceResult, OptimizerError> {
    opts.validate()?;
    fd.validate().map_err(|source| OptimizerError::Jacobian { frame: 0, source })?;
    if problem.frames() == 0 {
        return Err(OptimizerError::LengthMismatch { observations: 0, forces: 0 });
    }
    let run = match opts.step_rule {
        StepRule::GaussNewton => gauss_newton(problem, contacts, opts, fd)?,
        StepRule::Adaptive => adaptive(problem, contacts, opts, fd)?,
    };
    let n = problem.frames();
    let force_seq = unflatten(&run.forces, n);
    let contacts_out = ContactSet::from_flat(&run.contacts, contacts.radius())?;
    let states = problem.rollout(&force_seq, &contacts_out)?;
    let per_frame = per_frame_kp_error(problem, &states)?;
    Ok(InferenceResult {
        force_seq,
        contacts: contacts_out,
        simulated_states: states,
        loss_history: run.history,
        per_frame_kp_error: per_frame,
        best_loss: run.best_loss,
        best_iteration: run.best_iteration,
        iterations: run.iterations,
        converged: run.converged,
    })
}

struct Run {
    forces: Vec<f64>,
    contacts: Vec<f64>,
    history: Vec<f64>,
    best_loss: f64,
    best_iteration: usize,
    iterations: usize,
    converged: bool,
}

fn window_converged(best_history: &[f64], opts: &OptimizerOptions) -> bool {
    let best = *best_history.last().expect("history starts with the initial loss");
    if best <= opts.absolute_tol {
        return true;
    }
    if best_history.len() <= opts.convergence_window {
        return false;
    }
    let past = best_history[best_history.len() - 1 - opts.convergence_window];
    past - best <= opts.convergence_tol * past
}

/// Keypoint residuals of frames `1..=n` stacked in order, with their
/// Jacobian with respect to every force coordinate followed, optionally, by
/// the contact coordinates.
struct Linearization {
    loss: f64,
    residuals: DVector<f64>,
    jacobian: DMatrix<f64>,
}

fn linearize(
    problem: &TrajectoryProblem<'_>,
    force_seq: &[ForceSet],
    contacts: &ContactSet,
    fd: &FdConfig,
    with_contacts: bool,
) -> Result<Linearization, OptimizerError> {
    let states = problem.rollout(force_seq, contacts)?;
    let loss = problem.loss_of_states(&states)?;
    let n = force_seq.len();
    let width = 3 * contacts.len();

    let frames = problem
        .observations
        .iter()
        .enumerate()
        .map(|(t, obs)| {
            keypoint_residual_jacobian(obs, &states[t + 1], problem.model, problem.camera)
                .map_err(|source| OptimizerError::Projection { frame: t + 1, source })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let sim = RigidBodySimulator::new(problem.model, problem.sim);
    let jacobians: Vec<_> = (0..n)
        .into_par_iter()
        .map(|t| {
            let blocks = Blocks { state: t > 0, force: true, contact: with_contacts };
            partial_jacobians(&sim, &states[t], &force_seq[t], contacts, fd, blocks)
                .map_err(|source| OptimizerError::Jacobian { frame: t, source })
        })
        .collect();
    let jacobians = jacobians.into_iter().collect::<Result<Vec<_>, _>>()?;

    let offsets: Vec<usize> = frames
        .iter()
        .scan(0, |acc, (r, _)| {
            let start = *acc;
            *acc += r.len();
            Some(start)
        })
        .collect();
    let rows = offsets[n - 1] + frames[n - 1].0.len();
    let cols = n * width + if with_contacts { width } else { 0 };
    let mut residuals = DVector::zeros(rows);
    let mut jacobian = DMatrix::zeros(rows, cols);
    for (j, (r, _)) in frames.iter().enumerate() {
        residuals.rows_mut(offsets[j], r.len()).copy_from(r);
    }

    let d_states: Vec<Option<DMatrix<f64>>> = jacobians
        .iter()
        .map(|j| j.d_state.as_ref().map(|m| DMatrix::from_column_slice(m.nrows(), m.ncols(), m.as_slice())))
        .collect();
    let d_state = |t: usize| d_states[t].as_ref().expect("state block requested");
    for t in 0..n {
        // sensitivity of s_{j+1} to f_t, carried forward over j
        let mut sens = jacobians[t].d_force.clone().expect("force block requested");
        for j in t..n {
            if j > t {
                sens = d_state(j) * sens;
            }
            let h = &frames[j].1;
            jacobian.view_mut((offsets[j], t * width), (h.nrows(), width)).copy_from(&(h * &sens));
        }
    }
    if with_contacts {
        // the contacts enter every step, so their sensitivities accumulate
        let mut sens = DMatrix::zeros(crate::physics::STATE_DIM, width);
        for j in 0..n {
            let d_contact = jacobians[j].d_contact.as_ref().expect("contact block requested");
            sens = if j > 0 { d_state(j) * sens + d_contact } else { d_contact.clone() };
            let h = &frames[j].1;
            jacobian.view_mut((offsets[j], n * width), (h.nrows(), width)).copy_from(&(h * &sens));
        }
    }
    Ok(Linearization { loss, residuals, jacobian })
}

fn gauss_newton(
    problem: &TrajectoryProblem<'_>,
    contacts: &ContactSet,
    opts: &OptimizerOptions,
    fd: &FdConfig,
) -> Result<Run, OptimizerError> {
    let n = problem.frames();
    let width = 3 * contacts.len();
    let mut state = LmState { x: Vec::new(), c: contacts.flatten(), lambda: opts.initial_damping };
    let mut warm_iterations = 0;

    for horizon in 1..n {
        let prefix = TrajectoryProblem { observations: &problem.observations[..horizon], ..*problem };
        let seed: Vec<f64> = match state.x.len() {
            0 => vec![0.0; width],
            len => state.x[len - width..].to_vec(),
        };
        state.x.extend(seed);
        warm_iterations +=
            levenberg_marquardt(&prefix, &mut state, contacts.radius(), opts, fd, opts.warm_start_iterations)?.iterations;
    }
    let seed: Vec<f64> = match state.x.len() {
        0 => vec![0.0; width],
        len => state.x[len - width..].to_vec(),
    };
    state.x.extend(seed);
    state.lambda = opts.initial_damping;
    let outcome = levenberg_marquardt(problem, &mut state, contacts.radius(), opts, fd, opts.max_iterations)?;

    let best_loss = *outcome.history.last().expect("non-empty");
    Ok(Run {
        forces: state.x,
        contacts: state.c,
        best_loss,
        best_iteration: outcome.history.len() - 1,
        history: outcome.history,
        iterations: warm_iterations + outcome.iterations,
        converged: outcome.converged,
    })
}

struct LmState {
    x: Vec<f64>,
    c: Vec<f64>,
    lambda: f64,
}

struct LmOutcome {
    history: Vec<f64>,
    iterations: usize,
    converged: bool,
}

fn levenberg_marquardt(
    problem: &TrajectoryProblem<'_>,
    state: &mut LmState,
    radius: f64,
    opts: &OptimizerOptions,
    fd: &FdConfig,
    max_iterations: usize,
) -> Result<LmOutcome, OptimizerError> {
    let n = problem.frames();
    let n_force = state.x.len();
    let refine = opts.refine_contacts;

    let mut current = ContactSet::from_flat(&state.c, radius)?;
    let mut lin = linearize(problem, &unflatten(&state.x, n), &current, fd, refine)
        .map_err(|e| OptimizerError::InfeasibleScenario(Box::new(e)))?;
    if !lin.loss.is_finite() {
        return Err(OptimizerError::Diverged { iteration: 0 });
    }
    let mut history = vec![lin.loss];
    let mut iterations = 0;
    let mut converged = window_converged(&history, opts);

    while !converged && iterations < max_iterations {
        let g = lin.jacobian.tr_mul(&lin.residuals);
        let a = lin.jacobian.tr_mul(&lin.jacobian);
        let floor = 1e-12 * a.diagonal().max().max(f64::MIN_POSITIVE);

        let mut accepted = None;
        while state.lambda < 1e16 {
            let mut damped = a.clone();
            for i in 0..damped.nrows() {
                damped[(i, i)] += state.lambda * a[(i, i)].max(floor);
            }
            if let Some(chol) = damped.cholesky() {
                let delta = -chol.solve(&g);
                let x_new: Vec<f64> = state
                    .x
                    .iter()
                    .zip(delta.iter())
                    .map(|(v, d)| (v + d).clamp(-opts.force_bound, opts.force_bound))
                    .collect();
                let c_new: Vec<f64> = if refine {
                    state.c.iter().zip(delta.iter().skip(n_force)).map(|(v, d)| v + d).collect()
                } else {
                    state.c.clone()
                };
                if let Ok(set) = ContactSet::from_flat(&c_new, radius) {
                    if let Ok(loss) = total_loss(problem, &unflatten(&x_new, n), &set) {
                        if !loss.is_finite() {
                            return Err(OptimizerError::Diverged { iteration: iterations + 1 });
                        }
                        if loss < lin.loss {
                            accepted = Some((x_new, c_new, set, loss));
                            break;
                        }
                    }
                }
            }
            state.lambda *= 10.0;
        }
        let Some((x_new, c_new, set, loss)) = accepted else {
            converged = true;
            break;
        };
        iterations += 1;
        state.lambda = (state.lambda * 0.1).max(1e-15);
        state.x = x_new;
        state.c = c_new;
        current = set;
        history.push(loss);
        converged = window_converged(&history, opts);
        if !converged {
            lin = linearize(problem, &unflatten(&state.x, n), &current, fd, refine)?;
        }
    }
    Ok(LmOutcome { history, iterations, converged })
}

fn adaptive(
    problem: &TrajectoryProblem<'_>,
    contacts: &ContactSet,
    opts: &OptimizerOptions,
    fd: &FdConfig,
) -> Result<Run, OptimizerError> {
    let n = problem.frames();
    let k = contacts.len();
    let dim = n * 3 * k;

    let mut x = vec![0.0; dim];
    let mut c = contacts.flatten();
    let mut current = contacts.clone();

    let first = evaluate_with_gradients(problem, &unflatten(&x, n), &current, fd, opts.refine_contacts)
        .map_err(|e| OptimizerError::InfeasibleScenario(Box::new(e)))?;
    if !first.loss.is_finite() {
        return Err(OptimizerError::Diverged { iteration: 0 });
    }

    let mut history = vec![first.loss];
    let mut best_history = vec![first.loss];
    let mut best = (x.clone(), c.clone(), first.loss, 0usize);
    let mut eval = first;
    let mut step = AdaptiveStep::new(dim);
    let mut contact_step = AdaptiveStep::new(3 * k);
    let mut rate = opts.initial_rate;
    let mut contact_rate = opts.contact_rate;
    let mut stale = 0usize;
    let mut converged = window_converged(&best_history, opts);
    let mut iterations = 0;

    while !converged && iterations < opts.max_iterations {
        iterations += 1;

        let mut g: Vec<f64> = eval.forces.iter().flatten().flat_map(|v| v.iter().copied()).collect();
        clip(&mut g, opts.gradient_clip);
        step.apply(&mut x, &g, rate, opts);
        x.iter_mut().for_each(|v| *v = v.clamp(-opts.force_bound, opts.force_bound));

        if let Some(gc) = &eval.contacts {
            let mut gc: Vec<f64> = gc.iter().flat_map(|v| v.iter().copied()).collect();
            clip(&mut gc, opts.gradient_clip);
            let before = c.clone();
            contact_step.apply(&mut c, &gc, contact_rate, opts);
            match ContactSet::from_flat(&c, contacts.radius()) {
                Ok(set) => current = set,
                Err(_) => c = before,
            }
        }

        let next = evaluate_with_gradients(problem, &unflatten(&x, n), &current, fd, opts.refine_contacts);
        match next {
            Ok(e) if !e.loss.is_finite() => return Err(OptimizerError::Diverged { iteration: iterations }),
            Ok(e) => {
                history.push(e.loss);
                if e.loss < best.2 {
                    best = (x.clone(), c.clone(), e.loss, iterations);
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= opts.patience {
                        rate *= opts.rate_decay;
                        contact_rate *= opts.rate_decay;
                        stale = 0;
                    }
                }
                best_history.push(best.2);
                eval = e;
            }
            Err(OptimizerError::Projection { .. }) | Err(OptimizerError::Jacobian { .. }) => {
                // unscorable iterate: restart from the best point more cautiously
                x = best.0.clone();
                c = best.1.clone();
                current = ContactSet::from_flat(&c, contacts.radius())?;
                rate *= opts.rate_decay;
                contact_rate *= opts.rate_decay;
                step.reset();
                contact_step.reset();
                stale = 0;
                eval = evaluate_with_gradients(problem, &unflatten(&x, n), &current, fd, opts.refine_contacts)?;
                history.push(eval.loss);
                best_history.push(best.2);
            }
            Err(e) => return Err(e),
        }
        converged = window_converged(&best_history, opts);
    }

    let (forces, contacts, best_loss, best_iteration) = best;
    Ok(Run { forces, contacts, history, best_loss, best_iteration, iterations, converged })
}

/// Agreement between the adjoint gradient and central differences of
/// [`total_loss`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: f64,
    /// Force step of the reference differences (N).
    pub h: f64,
    pub coordinates: usize,
    pub max_abs_error: f64,
    /// `max|adjoint − reference| / max|reference|`.
    pub max_relative_error: f64,
    pub worst_coordinate: usize,
}

/// Central differences of the total loss over every force coordinate.
pub fn total_loss_fd_gradient(
    problem: &TrajectoryProblem<'_>,
    force_seq: &[ForceSet],
    contacts: &ContactSet,
    h: f64,
) -> Result<Vec<f64>, OptimizerError> {
    problem.check_len(force_seq)?;
    let n = force_seq.len();
    let base: Vec<f64> = force_seq.iter().flat_map(ForceSet::flatten).collect();
    (0..base.len())
        .into_par_iter()
        .map(|i| {
            let eval = |delta: f64| {
                let mut x = base.clone();
                x[i] += delta;
                total_loss(problem, &unflatten(&x, n), contacts)
            };
            Ok((eval(h)? - eval(-h)?) / (2.0 * h))
        })
        .collect()
}

/// Compares [`loss_gradients`] with [`total_loss_fd_gradient`].
pub fn grad_check(
    problem: &TrajectoryProblem<'_>,
    force_seq: &[ForceSet],
    contacts: &ContactSet,
    fd: &FdConfig,
    h: f64,
) -> Result<GradCheckReport, OptimizerError> {
    if !(h.is_finite() && h > 0.0) {
        return Err(OptimizerError::InvalidOptions("grad-check step must be positive".into()));
    }
    let eval = evaluate_with_gradients(problem, force_seq, contacts, fd, false)?;
    let adjoint: Vec<f64> = eval.forces.iter().flatten().flat_map(|v| v.iter().copied()).collect();
    let reference = total_loss_fd_gradient(problem, force_seq, contacts, h)?;
    let scale = reference.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let (worst_coordinate, max_abs_error) = adjoint
        .iter()
        .zip(&reference)
        .map(|(a, b)| (a - b).abs())
        .enumerate()
        .fold((0, 0.0f64), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    let max_relative_error = if scale > 0.0 {
        max_abs_error / scale
    } else if max_abs_error == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(GradCheckReport {
        loss: eval.loss,
        h,
        coordinates: adjoint.len(),
        max_abs_error,
        max_relative_error,
        worst_coordinate,
    })
}
