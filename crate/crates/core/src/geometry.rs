//! Pose and contact-point recovery from pixel annotations.
//!
//! Both solvers minimize squared reprojection error with the same damped
//! Gauss-Newton loop (Levenberg-Marquardt with a fixed ×10 / ×0.1 damping
//! schedule).
//!
//! [`solve_pnp`] works in camera coordinates. Without an initial guess it
//! scores a fixed grid of orientations, each with its least-squares
//! translation, and refines the best few. The result is reported as the
//! object-to-world pose.
//!
//! [`solve_contact_points`] fits each finger's object-frame point
//! independently across all frames in which it is visible.

use nalgebra::{
    DMatrix, DVector, Matrix2x3, Matrix3, SymmetricEigen, UnitQuaternion, Vector2, Vector3,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::physics::{ContactSet, PhysicsError};
use crate::projection::{project_points, Camera, Pose, ProjectionError};
use crate::serde_util;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("{visible} visible correspondences, at least {required} needed")]
    InsufficientCorrespondences { visible: usize, required: usize },
    #[error("finger {finger}: depth is unobservable from the visible frames")]
    DepthUnobservable { finger: usize },
    #[error("{what}: expected {expected} entries, found {found}")]
    SequenceMismatch { what: &'static str, expected: usize, found: usize },
    #[error("no valid starting point in front of the camera")]
    NoValidStart,
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
}

impl GeometryError {
    pub fn code(&self) -> &'static str {
        match self {
            GeometryError::InsufficientCorrespondences { .. } => "insufficient_correspondences",
            GeometryError::DepthUnobservable { .. } => "depth_unobservable",
            GeometryError::SequenceMismatch { .. } => "sequence_mismatch",
            GeometryError::NoValidStart => "no_valid_start",
            GeometryError::Projection(e) => e.code(),
            GeometryError::Physics(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    /// PnP results with a larger RMS residual are flagged.
    pub residual_gate_px: f64,
    /// PnP results whose scaled normal equations exceed this condition number
    /// are flagged as ambiguous.
    pub condition_gate: f64,
    /// Number of grid seeds refined when no initial pose is given.
    pub refined_seeds: usize,
    /// Two views constrain depth when their poses differ by at least this
    /// rotation (rad) or translation (m).
    pub min_view_rotation: f64,
    pub min_view_translation: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            initial_damping: 1e-3,
            damping_increase: 10.0,
            damping_decrease: 0.1,
            residual_gate_px: 20.0,
            condition_gate: 1e6,
            refined_seeds: 4,
            min_view_rotation: 5f64.to_radians(),
            min_view_translation: 0.01,
        }
    }
}

/// Object-to-world pose recovered from one frame of keypoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    #[serde(with = "serde_util::unit_quat")]
    pub rotation: UnitQuaternion<f64>,
    #[serde(with = "serde_util::vec3")]
    pub translation: Vector3<f64>,
    /// Root-mean-square reprojection distance over the visible keypoints.
    pub residual_px: f64,
    /// Visible keypoints reprojecting within the residual gate.
    pub inlier_count: usize,
    pub iterations: usize,
    pub residual_flagged: bool,
    pub ill_conditioned: bool,
    pub condition_number: f64,
}

impl PoseEstimate {
    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation, self.translation)
    }
}

/// One finger's recovered object-frame contact point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactEstimate {
    #[serde(with = "serde_util::vec3")]
    pub point: Vector3<f64>,
    pub residual_px: f64,
    pub iterations: usize,
}

trait LeastSquares {
    type Params: Clone;
    /// Stacked residuals and their Jacobian with respect to a local
    /// increment; `None` when the parameters are not admissible.
    fn linearize(&self, p: &Self::Params) -> Option<(DVector<f64>, DMatrix<f64>)>;
    fn cost(&self, p: &Self::Params) -> Option<f64>;
    fn retract(&self, p: &Self::Params, delta: &DVector<f64>) -> Self::Params;
}

struct Fit<P> {
    params: P,
    cost: f64,
    iterations: usize,
}

fn levenberg_marquardt<L: LeastSquares>(problem: &L, init: L::Params, opts: &SolverOptions) -> Option<Fit<L::Params>> {
    let mut p = init;
    let mut cost = problem.cost(&p)?;
    let mut lambda = opts.initial_damping;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        let (r, j) = problem.linearize(&p)?;
        let g = j.tr_mul(&r);
        let h = j.tr_mul(&j);
        if g.amax() <= 1e-15 * (1.0 + cost) {
            break;
        }
        iterations += 1;
        let diag_floor = 1e-12 * h.diagonal().max().max(1e-300);
        let mut accepted = None;
        while lambda < 1e16 {
            let mut a = h.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += lambda * h[(i, i)].max(diag_floor);
            }
            if let Some(chol) = a.cholesky() {
                let delta = -chol.solve(&g);
                let candidate = problem.retract(&p, &delta);
                if let Some(c) = problem.cost(&candidate) {
                    if c < cost {
                        accepted = Some((candidate, c, delta));
                        break;
                    }
                }
            }
            lambda *= opts.damping_increase;
        }
        let Some((candidate, c, delta)) = accepted else {
            break;
        };
        let decrease = cost - c;
        p = candidate;
        cost = c;
        lambda = (lambda * opts.damping_decrease).max(1e-15);
        if delta.amax() <= 1e-14 || decrease <= 1e-16 * cost {
            break;
        }
    }
    Some(Fit { params: p, cost, iterations })
}

/// Pixel projection Jacobian at a camera-frame point.
fn projection_jacobian(camera: &Camera, pc: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / pc.z;
    Matrix2x3::new(
        camera.fx * iz,
        0.0,
        -camera.fx * pc.x * iz * iz,
        0.0,
        camera.fy * iz,
        -camera.fy * pc.y * iz * iz,
    )
}

/// Pose in camera coordinates: `x_c = r·x + t`.
#[derive(Clone, Copy, Debug)]
struct CameraPose {
    r: UnitQuaternion<f64>,
    t: Vector3<f64>,
}

struct PnpProblem<'a> {
    points: Vec<Vector3<f64>>,
    pixels: Vec<Vector2<f64>>,
    camera: &'a Camera,
}

impl PnpProblem<'_> {
    fn cost_of(&self, pose: &CameraPose) -> Option<f64> {
        let mut total = 0.0;
        for (x, l) in self.points.iter().zip(&self.pixels) {
            total += (self.camera.project_camera_point(&(pose.r * x + pose.t))? - l).norm_squared();
        }
        Some(total)
    }

    /// Least-squares translation for a fixed rotation, from the linear
    /// collinearity constraints.
    fn translation_for(&self, r: &UnitQuaternion<f64>) -> Option<Vector3<f64>> {
        let mut ata = Matrix3::zeros();
        let mut atb = Vector3::zeros();
        for (x, l) in self.points.iter().zip(&self.pixels) {
            let y = r * x;
            let ray = self.camera.back_project(l);
            for (row, b) in [
                (Vector3::new(1.0, 0.0, -ray.x), ray.x * y.z - y.x),
                (Vector3::new(0.0, 1.0, -ray.y), ray.y * y.z - y.y),
            ] {
                ata += row * row.transpose();
                atb += row * b;
            }
        }
        ata.cholesky().map(|c| c.solve(&atb))
    }
}

impl LeastSquares for PnpProblem<'_> {
    type Params = CameraPose;

    fn linearize(&self, pose: &CameraPose) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let m = self.points.len();
        let mut r = DVector::zeros(2 * m);
        let mut j = DMatrix::zeros(2 * m, 6);
        for (i, (x, l)) in self.points.iter().zip(&self.pixels).enumerate() {
            let rx = pose.r * x;
            let pc = rx + pose.t;
            let px = self.camera.project_camera_point(&pc)?;
            r.rows_mut(2 * i, 2).copy_from(&(px - l));
            let dp = projection_jacobian(self.camera, &pc);
            j.view_mut((2 * i, 0), (2, 3)).copy_from(&(-dp * rx.cross_matrix()));
            j.view_mut((2 * i, 3), (2, 3)).copy_from(&dp);
        }
        Some((r, j))
    }

    fn cost(&self, pose: &CameraPose) -> Option<f64> {
        self.cost_of(pose)
    }

    fn retract(&self, pose: &CameraPose, delta: &DVector<f64>) -> CameraPose {
        let w = Vector3::new(delta[0], delta[1], delta[2]);
        CameraPose {
            r: UnitQuaternion::from_scaled_axis(w) * pose.r,
            t: pose.t + Vector3::new(delta[3], delta[4], delta[5]),
        }
    }
}

/// Fixed orientation grid: 8 yaw × 5 pitch × 8 roll angles.
fn seed_rotations() -> Vec<UnitQuaternion<f64>> {
    let step = std::f64::consts::FRAC_PI_4;
    let mut out = Vec::with_capacity(320);
    for yaw in 0..8 {
        for pitch in -2..=2 {
            for roll in 0..8 {
                out.push(UnitQuaternion::from_euler_angles(
                    roll as f64 * step,
                    pitch as f64 * std::f64::consts::FRAC_PI_6,
                    yaw as f64 * step,
                ));
            }
        }
    }
    out
}

fn to_camera(pose: &Pose, camera: &Camera) -> CameraPose {
    let ext = &camera.extrinsic;
    CameraPose { r: ext.rotation * pose.rotation, t: ext.rotation * pose.translation + ext.translation }
}

fn to_world(pose: &CameraPose, camera: &Camera) -> Pose {
    let inv = camera.extrinsic.rotation.inverse();
    Pose::new(inv * pose.r, inv * (pose.t - camera.extrinsic.translation))
}

/// Condition number of `JᵀJ` after scaling its diagonal to one.
fn scaled_condition(j: &DMatrix<f64>) -> f64 {
    let h = j.tr_mul(j);
    let d = h.diagonal().map(|x| if x > 0.0 { 1.0 / x.sqrt() } else { 0.0 });
    let scaled = DMatrix::from_fn(h.nrows(), h.ncols(), |r, c| h[(r, c)] * d[r] * d[c]);
    let eig = SymmetricEigen::new(scaled).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Recovers an object pose from one frame of keypoint pixels.
pub fn solve_pnp(
    keypoints_3d: &[Vector3<f64>],
    pixels: &[Option<Vector2<f64>>],
    camera: &Camera,
    init: Option<&Pose>,
    opts: &SolverOptions,
) -> Result<PoseEstimate, GeometryError> {
    if pixels.len() != keypoints_3d.len() {
        return Err(GeometryError::SequenceMismatch {
            what: "pixels",
            expected: keypoints_3d.len(),
            found: pixels.len(),
        });
    }
    let (points, visible): (Vec<_>, Vec<_>) =
        keypoints_3d.iter().zip(pixels).filter_map(|(x, p)| p.map(|p| (*x, p))).unzip();
    if points.len() < 4 {
        return Err(GeometryError::InsufficientCorrespondences { visible: points.len(), required: 4 });
    }
    let problem = PnpProblem { points, pixels: visible, camera };

    let starts: Vec<CameraPose> = match init {
        Some(pose) => vec![to_camera(pose, camera)],
        None => {
            let mut scored: Vec<(f64, CameraPose)> = seed_rotations()
                .into_iter()
                .filter_map(|r| {
                    let t = problem.translation_for(&r)?;
                    let pose = CameraPose { r, t };
                    Some((problem.cost_of(&pose)?, pose))
                })
                .collect();
            scored.sort_by(|a, b| a.0.total_cmp(&b.0));
            scored.into_iter().take(opts.refined_seeds.max(1)).map(|(_, p)| p).collect()
        }
    };

    let mut best: Option<Fit<CameraPose>> = None;
    for start in starts {
        if let Some(fit) = levenberg_marquardt(&problem, start, opts) {
            if best.as_ref().is_none_or(|b| fit.cost < b.cost) {
                best = Some(fit);
            }
        }
    }
    let fit = best.ok_or(GeometryError::NoValidStart)?;

    let pose = to_world(&fit.params, camera);
    let projected = project_points(&problem.points, &pose, camera)?;
    let dists: Vec<f64> = projected.iter().zip(&problem.pixels).map(|(p, l)| (p - l).norm()).collect();
    let residual_px = (dists.iter().map(|d| d * d).sum::<f64>() / dists.len() as f64).sqrt();
    let inlier_count = dists.iter().filter(|d| **d <= opts.residual_gate_px).count();
    let condition_number = problem.linearize(&fit.params).map_or(f64::INFINITY, |(_, j)| scaled_condition(&j));

    Ok(PoseEstimate {
        rotation: pose.rotation,
        translation: pose.translation,
        residual_px,
        inlier_count,
        iterations: fit.iterations,
        residual_flagged: residual_px > opts.residual_gate_px,
        ill_conditioned: !(condition_number <= opts.condition_gate),
        condition_number,
    })
}

struct ContactProblem<'a> {
    /// Camera-frame rotation and translation of the object in each used frame.
    views: Vec<CameraPose>,
    pixels: Vec<Vector2<f64>>,
    camera: &'a Camera,
}

impl LeastSquares for ContactProblem<'_> {
    type Params = Vector3<f64>;

    fn linearize(&self, c: &Vector3<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let m = self.views.len();
        let mut r = DVector::zeros(2 * m);
        let mut j = DMatrix::zeros(2 * m, 3);
        for (i, (view, l)) in self.views.iter().zip(&self.pixels).enumerate() {
            let pc = view.r * c + view.t;
            let px = self.camera.project_camera_point(&pc)?;
            r.rows_mut(2 * i, 2).copy_from(&(px - l));
            let rot = view.r.to_rotation_matrix();
            j.view_mut((2 * i, 0), (2, 3)).copy_from(&(projection_jacobian(self.camera, &pc) * rot.matrix()));
        }
        Some((r, j))
    }

    fn cost(&self, c: &Vector3<f64>) -> Option<f64> {
        let mut total = 0.0;
        for (view, l) in self.views.iter().zip(&self.pixels) {
            total += (self.camera.project_camera_point(&(view.r * c + view.t))? - l).norm_squared();
        }
        Some(total)
    }

    fn retract(&self, c: &Vector3<f64>, delta: &DVector<f64>) -> Vector3<f64> {
        c + Vector3::new(delta[0], delta[1], delta[2])
    }
}

fn views_differ(a: &Pose, b: &Pose, opts: &SolverOptions) -> bool {
    a.rotation.angle_to(&b.rotation) >= opts.min_view_rotation
        || (a.translation - b.translation).norm() >= opts.min_view_translation
}

/// Recovers each finger's object-frame contact point from its pixel track.
///
/// `tracks[t][i]` is finger `i`'s pixel in frame `t`, observed with the
/// object at `poses[t]`. Fingers are solved independently, so one
/// unobservable finger does not prevent the others from being recovered.
pub fn solve_contact_points(
    tracks: &[Vec<Option<Vector2<f64>>>],
    poses: &[Pose],
    camera: &Camera,
    init: Option<&ContactSet>,
    opts: &SolverOptions,
) -> Result<Vec<Result<ContactEstimate, GeometryError>>, GeometryError> {
    if tracks.len() != poses.len() {
        return Err(GeometryError::SequenceMismatch { what: "poses", expected: tracks.len(), found: poses.len() });
    }
    let k = tracks.first().map_or(0, Vec::len);
    if let Some(bad) = tracks.iter().find(|t| t.len() != k) {
        return Err(GeometryError::SequenceMismatch { what: "contact pixels per frame", expected: k, found: bad.len() });
    }
    if let Some(init) = init {
        if init.len() != k {
            return Err(GeometryError::SequenceMismatch { what: "initial contacts", expected: k, found: init.len() });
        }
    }
    Ok((0..k).map(|finger| solve_finger(finger, tracks, poses, camera, init, opts)).collect())
}

fn solve_finger(
    finger: usize,
    tracks: &[Vec<Option<Vector2<f64>>>],
    poses: &[Pose],
    camera: &Camera,
    init: Option<&ContactSet>,
    opts: &SolverOptions,
) -> Result<ContactEstimate, GeometryError> {
    let used: Vec<(usize, Vector2<f64>)> =
        tracks.iter().enumerate().filter_map(|(t, frame)| frame[finger].map(|px| (t, px))).collect();
    let observable = used
        .iter()
        .enumerate()
        .any(|(a, (ta, _))| used[a + 1..].iter().any(|(tb, _)| views_differ(&poses[*ta], &poses[*tb], opts)));
    if !observable {
        return Err(GeometryError::DepthUnobservable { finger });
    }

    let problem = ContactProblem {
        views: used.iter().map(|(t, _)| to_camera(&poses[*t], camera)).collect(),
        pixels: used.iter().map(|(_, px)| *px).collect(),
        camera,
    };
    let start = match init {
        Some(set) => set.points()[finger],
        None => {
            let (view, px) = (&problem.views[0], &problem.pixels[0]);
            let depth = view.t.z;
            if depth > 0.0 {
                view.r.inverse() * (camera.back_project(px) * depth - view.t)
            } else {
                Vector3::zeros()
            }
        }
    };
    let fit = levenberg_marquardt(&problem, start, opts).ok_or(GeometryError::NoValidStart)?;
    Ok(ContactEstimate {
        point: fit.params,
        residual_px: (fit.cost / used.len() as f64).sqrt(),
        iterations: fit.iterations,
    })
}

/// Collects per-finger estimates into a contact set, failing on the first
/// finger that could not be solved.
pub fn contact_set_from(
    estimates: &[Result<ContactEstimate, GeometryError>],
    radius: f64,
) -> Result<ContactSet, GeometryError> {
    let points = estimates
        .iter()
        .map(|e| e.as_ref().map(|e| e.point).map_err(Clone::clone))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ContactSet::with_radius(points, radius)?)
}
