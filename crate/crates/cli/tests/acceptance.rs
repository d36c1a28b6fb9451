//! End-to-end acceptance checks. Prints one pass/fail line per criterion
//! and exits non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use forcesolve::finite_diff::Simulator;
use forcesolve::optimizer::total_loss_fd_gradient;
use forcesolve::synthetic::default_camera;
use forcesolve::{
    evaluate, gen_synthetic, infer_forces, loss_gradients, net_wrench, project_points, quaternion_distance,
    simulate_trajectory, solve_contact_points, solve_pnp, step, step_jacobians, step_jacobians_with,
    ContactSet, FdConfig, FdScheme, ForceProfile, ForceSet, Keypoint, ObjectModel, OptimizerOptions, PhysicsError,
    Pose, RigidBodySimulator, RigidBodyState, Scenario, SimulationConfig, SolverOptions, SyntheticSpec,
};
use nalgebra::{DMatrix, Matrix3, Matrix3x4, Matrix4, Matrix4x3, Quaternion, UnitQuaternion, Vector2, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("gravity-only rollout matches the ballistic closed form", ballistic),
        ("free body conserves linear and angular momentum", momentum),
        ("finite-difference step Jacobians match the analytic Jacobian", step_jacobian_oracle),
        ("adjoint loss gradients match differences of the total loss", gradient_agreement),
        ("planted smooth forces are recovered", recovery),
        ("hovering object needs an upward force of m*g", hover),
        ("pose and contact solvers recover noiseless geometry", geometry),
        ("quaternion distance and evaluation of generative scenarios", metrics),
        ("every subcommand is reproducible byte for byte", reproducible),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} PASS {name}: {detail} [{elapsed:.2} s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL {name}: {detail} [{elapsed:.2} s]", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(ok: bool, detail: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(detail())
    }
}

fn tumbling_model() -> ObjectModel {
    let inertia = Matrix3::new(0.004, 0.0003, -0.0002, 0.0003, 0.006, 0.0001, -0.0002, 0.0001, 0.009);
    let keypoints = (0..8)
        .map(|i| {
            let s = |bit: usize| if i >> bit & 1 == 1 { 1.0 } else { -1.0 };
            Keypoint { name: format!("corner{i}"), position: Vector3::new(0.08 * s(0), 0.05 * s(1), 0.03 * s(2)) }
        })
        .collect();
    ObjectModel::new(0.7, inertia, keypoints).unwrap()
}

fn idle_contact() -> (ForceSet, ContactSet) {
    (ForceSet::zeros(1), ContactSet::new(vec![Vector3::new(0.01, 0.0, 0.0)]).unwrap())
}

fn ballistic() -> Outcome {
    let model = tumbling_model();
    let cfg = SimulationConfig::default();
    let s0 = RigidBodyState {
        position: Vector3::new(0.1, 2.0, 0.3),
        orientation: UnitQuaternion::from_euler_angles(0.3, -0.2, 1.1),
        linear_velocity: Vector3::new(0.4, -0.2, 1.5),
        angular_velocity: Vector3::new(2.0, -1.0, 0.5),
    };
    let (f, c) = idle_contact();
    let forces = vec![f; 10];
    let start = Instant::now();
    let states = simulate_trajectory(&s0, &forces, &c, &model, &cfg).map_err(|e| e.to_string())?;
    let runtime = start.elapsed();
    let worst = states
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let t = i as f64 * cfg.frame_dt;
            (s.position - (s0.position + s0.linear_velocity * t + cfg.gravity * (0.5 * t * t))).norm()
        })
        .fold(0.0, f64::max);
    ensure(worst < 1e-4, || format!("position error {worst:.3e} m"))?;
    ensure(runtime < Duration::from_millis(10), || format!("rollout took {runtime:?}"))?;
    Ok(format!("max position error {worst:.2e} m, rollout {:.3} ms", runtime.as_secs_f64() * 1e3))
}

fn momentum() -> Outcome {
    let model = tumbling_model();
    let cfg = SimulationConfig::zero_gravity();
    let s0 = RigidBodyState {
        position: Vector3::new(0.0, 2.0, 0.0),
        orientation: UnitQuaternion::from_euler_angles(0.5, 0.2, -0.7),
        linear_velocity: Vector3::new(0.3, -0.1, 0.2),
        angular_velocity: Vector3::new(3.0, -2.0, 4.0),
    };
    let (f, c) = idle_contact();
    let frames = 300 / cfg.substeps_per_frame;
    let states = simulate_trajectory(&s0, &vec![f; frames], &c, &model, &cfg).map_err(|e| e.to_string())?;
    let spin = |s: &RigidBodyState| {
        let r = s.orientation.to_rotation_matrix();
        r.matrix() * model.inertia_body * r.matrix().transpose() * s.angular_velocity
    };
    let (p0, l0) = (s0.linear_velocity * model.mass, spin(&s0));
    let mut worst_p = 0.0f64;
    let mut worst_l = 0.0f64;
    for s in &states {
        worst_p = worst_p.max((s.linear_velocity * model.mass - p0).norm() / p0.norm());
        worst_l = worst_l.max((spin(s) - l0).norm() / l0.norm());
    }
    ensure(worst_p < 1e-9, || format!("linear momentum drift {worst_p:.3e}"))?;
    ensure(worst_l < 1e-6, || format!("angular momentum drift {worst_l:.3e}"))?;
    Ok(format!("{} substeps, relative drift {worst_p:.1e} linear, {worst_l:.1e} angular", frames * cfg.substeps_per_frame))
}

fn skew(x: &Vector3<f64>) -> Matrix3<f64> {
    x.cross_matrix()
}

fn quat_vec(q: &UnitQuaternion<f64>) -> Vector4<f64> {
    Vector4::new(q.w, q.i, q.j, q.k)
}

/// Derivative of `R(q)·x` with respect to `(w, x, y, z)` for a fixed `x`.
fn rotated_point_jacobian(q: &Vector4<f64>, x: &Vector3<f64>) -> Matrix3x4<f64> {
    let w = q[0];
    let u = Vector3::new(q[1], q[2], q[3]);
    let d_w = 2.0 * w * x + 2.0 * u.cross(x);
    let d_u = -2.0 * x * u.transpose() + 2.0 * (u * x.transpose() + Matrix3::identity() * u.dot(x)) - 2.0 * w * skew(x);
    let mut out = Matrix3x4::zeros();
    out.set_column(0, &d_w);
    out.fixed_columns_mut::<3>(1).copy_from(&d_u);
    out
}

/// Derivative of `R M Rᵀ y` with respect to the quaternion, for fixed symmetric `M` and `y`.
fn sandwich_jacobian(q: &Vector4<f64>, r: &Matrix3<f64>, m: &Matrix3<f64>, y: &Vector3<f64>) -> Matrix3x4<f64> {
    let conj = Matrix4::from_diagonal(&Vector4::new(1.0, -1.0, -1.0, -1.0));
    let q_conj = conj * q;
    rotated_point_jacobian(q, &(m * r.transpose() * y)) + r * m * rotated_point_jacobian(&q_conj, y) * conj
}

fn left_product(a: &Vector4<f64>) -> Matrix4<f64> {
    Matrix4::new(
        a[0], -a[1], -a[2], -a[3], a[1], a[0], -a[3], a[2], a[2], a[3], a[0], -a[1], a[3], -a[2], a[1], a[0],
    )
}

fn right_product(b: &Vector4<f64>) -> Matrix4<f64> {
    Matrix4::new(
        b[0], -b[1], -b[2], -b[3], b[1], b[0], b[3], -b[2], b[2], -b[3], b[0], b[1], b[3], b[2], -b[1], b[0],
    )
}

/// Derivative of the unit quaternion `exp(φ)` with respect to the rotation vector `φ`.
fn exp_jacobian(phi: &Vector3<f64>) -> Matrix4x3<f64> {
    let theta = phi.norm();
    let mut out = Matrix4x3::zeros();
    if theta < 1e-8 {
        out.set_row(0, &(-phi.transpose() / 4.0));
        out.fixed_rows_mut::<3>(1).copy_from(&(Matrix3::identity() * 0.5));
        return out;
    }
    let axis = phi / theta;
    let (sin, cos) = (theta / 2.0).sin_cos();
    let s = sin / theta;
    let ds = (theta * cos / 2.0 - sin) / (theta * theta);
    out.set_row(0, &(-sin / 2.0 * axis.transpose()));
    out.fixed_rows_mut::<3>(1).copy_from(&(Matrix3::identity() * s + phi * ds * axis.transpose()));
    out
}

/// Closed-form Jacobian of one integrator substep, with columns
/// `[state (13), forces (3k), contacts (3k)]`.
fn substep_jacobian(s: &RigidBodyState, forces: &ForceSet, contacts: &ContactSet, model: &ObjectModel, h: f64) -> DMatrix<f64> {
    let k = contacts.len();
    let cols = 13 + 6 * k;
    let q = quat_vec(&s.orientation);
    let r = *s.orientation.to_rotation_matrix().matrix();
    let ib = model.inertia_body;
    let b = ib.try_inverse().unwrap();
    let m = model.mass;

    let mut torque = Vector3::zeros();
    let mut d_tau = DMatrix::<f64>::zeros(3, cols);
    for (i, (f, c)) in forces.forces().iter().zip(contacts.points()).enumerate() {
        let rc = r * c;
        torque += rc.cross(f);
        let d_q = -skew(f) * rotated_point_jacobian(&q, c);
        let mut view = d_tau.view_mut((0, 3), (3, 4));
        view += d_q;
        d_tau.view_mut((0, 13 + 3 * i), (3, 3)).copy_from(&skew(&rc));
        d_tau.view_mut((0, 13 + 3 * k + 3 * i), (3, 3)).copy_from(&(-skew(f) * r));
    }

    let inertia_world = r * ib * r.transpose();
    let momentum = inertia_world * s.angular_velocity + torque * h;
    let mut d_l = d_tau * h;
    {
        let mut view = d_l.view_mut((0, 3), (3, 4));
        view += sandwich_jacobian(&q, &r, &ib, &s.angular_velocity);
    }
    {
        let mut view = d_l.view_mut((0, 10), (3, 3));
        view += inertia_world;
    }

    let inverse_world = r * b * r.transpose();
    let omega_mid = inverse_world * momentum;
    let mut d_omega_mid = DMatrix::from_fn(3, cols, |_, _| 0.0);
    d_omega_mid.copy_from(&(DMatrix::from_column_slice(3, 3, inverse_world.as_slice()) * &d_l));
    {
        let mut view = d_omega_mid.view_mut((0, 3), (3, 4));
        view += sandwich_jacobian(&q, &r, &b, &momentum);
    }

    let phi = omega_mid * h;
    let delta = UnitQuaternion::from_scaled_axis(phi);
    let dv = quat_vec(&delta);
    let d_delta = DMatrix::from_column_slice(4, 3, exp_jacobian(&phi).as_slice()) * &d_omega_mid * h;
    let mut d_prod = DMatrix::from_column_slice(4, 4, right_product(&q).as_slice()) * d_delta;
    {
        let mut view = d_prod.view_mut((0, 3), (4, 4));
        view += left_product(&dv);
    }
    let product = left_product(&dv) * q;
    let q_next = product / product.norm();
    let project = (Matrix4::identity() - q_next * q_next.transpose()) / product.norm();
    let d_q_next = DMatrix::from_column_slice(4, 4, project.as_slice()) * d_prod;

    let unit_next = UnitQuaternion::from_quaternion(Quaternion::new(q_next[0], q_next[1], q_next[2], q_next[3]));
    let r_next = *unit_next.to_rotation_matrix().matrix();
    let inverse_next = r_next * b * r_next.transpose();
    let d_omega_next = DMatrix::from_column_slice(3, 4, sandwich_jacobian(&q_next, &r_next, &b, &momentum).as_slice())
        * &d_q_next
        + DMatrix::from_column_slice(3, 3, inverse_next.as_slice()) * &d_l;

    let mut out = DMatrix::zeros(13, cols);
    let eye = Matrix3::<f64>::identity();
    out.view_mut((0, 0), (3, 3)).copy_from(&eye);
    out.view_mut((0, 7), (3, 3)).copy_from(&(eye * h));
    out.view_mut((7, 7), (3, 3)).copy_from(&eye);
    for i in 0..k {
        out.view_mut((0, 13 + 3 * i), (3, 3)).copy_from(&(eye * (h * h / (2.0 * m))));
        out.view_mut((7, 13 + 3 * i), (3, 3)).copy_from(&(eye * (h / m)));
    }
    out.view_mut((3, 0), (4, cols)).copy_from(&d_q_next);
    out.view_mut((10, 0), (3, cols)).copy_from(&d_omega_next);
    out
}

/// Closed-form Jacobian of a whole frame, composed over its substeps. The
/// quaternion input is renormalized before use, as in the simulator.
fn frame_jacobian(
    s0: &RigidBodyState,
    forces: &ForceSet,
    contacts: &ContactSet,
    model: &ObjectModel,
    cfg: &SimulationConfig,
) -> Result<DMatrix<f64>, PhysicsError> {
    let k = contacts.len();
    let cols = 13 + 6 * k;
    let mut total = DMatrix::<f64>::zeros(13, cols);
    total.view_mut((0, 0), (13, 13)).fill_with_identity();
    let q = quat_vec(&s0.orientation);
    let project = Matrix4::identity() - q * q.transpose();
    total.view_mut((3, 3), (4, 4)).copy_from(&project);

    let one = SimulationConfig { substeps_per_frame: 1, frame_dt: cfg.substep_dt(), ..*cfg };
    let mut s = *s0;
    for _ in 0..cfg.substeps_per_frame {
        let sub = substep_jacobian(&s, forces, contacts, model, cfg.substep_dt());
        let mut next = sub.columns(0, 13) * &total;
        {
            let mut tail = next.columns_mut(13, 6 * k);
            tail += sub.columns(13, 6 * k);
        }
        total = next;
        s = step(&s, forces, contacts, model, &one)?;
    }
    Ok(total)
}

fn relative_max_error(fd: &DMatrix<f64>, exact: &DMatrix<f64>) -> f64 {
    (fd - exact).amax() / exact.amax()
}

struct Counting<'a> {
    inner: RigidBodySimulator<'a>,
    calls: AtomicUsize,
}

impl Simulator for Counting<'_> {
    fn step(&self, state: &RigidBodyState, forces: &ForceSet, contacts: &ContactSet) -> Result<RigidBodyState, PhysicsError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.step(state, forces, contacts)
    }
}

fn step_jacobian_oracle() -> Outcome {
    let model = tumbling_model();
    let fd = FdConfig { h_force: 0.01, h_state: 0.01, h_contact: 0.05, scheme: FdScheme::Central };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = [0.0f64; 3];
    for substeps in [1, 10] {
        let cfg = SimulationConfig { substeps_per_frame: substeps, ..Default::default() };
        for _ in 0..5 {
            let k = 5;
            let state = RigidBodyState {
                position: Vector3::from_fn(|_, _| rng.gen_range(-0.5..0.5)),
                orientation: UnitQuaternion::from_euler_angles(
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-1.5..1.5),
                    rng.gen_range(-3.0..3.0),
                ),
                linear_velocity: Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)),
                angular_velocity: Vector3::from_fn(|_, _| rng.gen_range(-2.0..2.0)),
            };
            let forces =
                ForceSet::new((0..k).map(|_| Vector3::from_fn(|_, _| rng.gen_range(-3.0..3.0))).collect()).unwrap();
            let contacts =
                ContactSet::new((0..k).map(|_| Vector3::from_fn(|_, _| rng.gen_range(-0.08..0.08))).collect()).unwrap();

            let exact = frame_jacobian(&state, &forces, &contacts, &model, &cfg).map_err(|e| e.to_string())?;
            let jac = step_jacobians(&state, &forces, &contacts, &model, &cfg, &fd).map_err(|e| e.to_string())?;
            let d_state = DMatrix::from_column_slice(13, 13, jac.d_state.as_slice());
            for (slot, (fd_block, start, width)) in
                [(d_state, 0, 13), (jac.d_force, 13, 3 * k), (jac.d_contact, 13 + 3 * k, 3 * k)].into_iter().enumerate()
            {
                let exact_block = exact.columns(start, width).into_owned();
                worst[slot] = worst[slot].max(relative_max_error(&fd_block, &exact_block));
            }
        }
    }
    ensure(worst.iter().all(|&e| e < 1e-3), || {
        format!("relative errors state {:.2e}, force {:.2e}, contact {:.2e}", worst[0], worst[1], worst[2])
    })?;

    let cfg = SimulationConfig::default();
    let counter = Counting { inner: RigidBodySimulator::new(&model, &cfg), calls: AtomicUsize::new(0) };
    let forces = ForceSet::new(vec![Vector3::new(0.1, 0.2, 0.3); 5]).unwrap();
    let contacts = ContactSet::new((0..5).map(|i| Vector3::new(0.01 * i as f64, 0.02, -0.01)).collect()).unwrap();
    let mut calls = Vec::new();
    for scheme in [FdScheme::Forward, FdScheme::Central] {
        counter.calls.store(0, Ordering::Relaxed);
        step_jacobians_with(&counter, &RigidBodyState::default(), &forces, &contacts, &FdConfig { scheme, ..fd })
            .map_err(|e| e.to_string())?;
        calls.push(counter.calls.load(Ordering::Relaxed));
    }
    ensure(calls == [44, 86], || format!("forward/central call counts {calls:?}"))?;
    Ok(format!(
        "relative max errors state {:.1e}, force {:.1e}, contact {:.1e}; {} forward and {} central calls for k = 5",
        worst[0], worst[1], worst[2], calls[0], calls[1]
    ))
}

fn gradient_agreement() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let sc = gen_synthetic(seed, &SyntheticSpec { n_frames: 5, ..Default::default() }).map_err(|e| e.to_string())?;
        let contacts = sc.ground_truth.as_ref().unwrap().contact_set().map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let forces: Vec<ForceSet> = (0..5)
            .map(|_| ForceSet::new((0..5).map(|_| Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0))).collect()).unwrap())
            .collect();
        let problem = sc.problem();
        let adjoint: Vec<f64> = loss_gradients(&problem, &forces, &contacts, &FdConfig::default())
            .map_err(|e| e.to_string())?
            .iter()
            .flatten()
            .flat_map(|g| g.iter().copied().collect::<Vec<_>>())
            .collect();
        let reference = total_loss_fd_gradient(&problem, &forces, &contacts, 1e-4).map_err(|e| e.to_string())?;
        let scale = reference.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let err = adjoint.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    ensure(worst < 1e-2, || format!("relative max-norm error {worst:.3e}"))?;
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("20 scenarios, worst relative max-norm error {worst:.2e}"))
}

fn stacked_wrench(state: &RigidBodyState, forces: &ForceSet, contacts: &ContactSet) -> Result<Vec<f64>, String> {
    let (f, t) = net_wrench(state, forces, contacts).map_err(|e| e.to_string())?;
    Ok(f.iter().chain(t.iter()).copied().collect())
}

fn infer(sc: &Scenario) -> Result<(forcesolve::InferenceResult, ContactSet), String> {
    let contacts = sc.ground_truth.as_ref().unwrap().contact_set().map_err(|e| e.to_string())?;
    let res = infer_forces(&sc.problem(), &contacts, &OptimizerOptions::default(), &FdConfig::default())
        .map_err(|e| e.to_string())?;
    Ok((res, contacts))
}

fn recovery() -> Outcome {
    let mut worst_kp = 0.0f64;
    let mut worst_wrench = 0.0f64;
    let mut slowest = Duration::ZERO;
    for seed in 1..=10 {
        let sc = gen_synthetic(seed, &SyntheticSpec::default()).map_err(|e| e.to_string())?;
        let gt = sc.ground_truth.as_ref().unwrap();
        let planted = gt.force_seq().map_err(|e| e.to_string())?;
        let start = Instant::now();
        let (res, contacts) = infer(&sc)?;
        slowest = slowest.max(start.elapsed());

        let kp = res.per_frame_kp_error.iter().sum::<f64>() / res.per_frame_kp_error.len() as f64;
        worst_kp = worst_kp.max(kp);
        let truth_states = simulate_trajectory(&sc.initial_state, &planted, &contacts, &sc.object, &sc.sim)
            .map_err(|e| e.to_string())?;
        for t in 0..sc.n_frames {
            let want = stacked_wrench(&truth_states[t], &planted[t], &contacts)?;
            let got = stacked_wrench(&res.simulated_states[t], &res.force_seq[t], &res.contacts)?;
            let norm = want.iter().map(|x| x * x).sum::<f64>().sqrt();
            let diff = want.iter().zip(&got).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            worst_wrench = worst_wrench.max(diff / norm);
        }
    }
    ensure(worst_kp < 2.0, || format!("mean keypoint error {worst_kp:.3} px"))?;
    ensure(worst_wrench < 0.05, || format!("net wrench error {:.2}%", worst_wrench * 100.0))?;
    ensure(slowest < Duration::from_secs(60), || format!("slowest inference {slowest:?}"))?;
    Ok(format!(
        "10 seeds, worst mean kp error {worst_kp:.2e} px, worst frame wrench error {:.3}%, slowest {:.2} s",
        worst_wrench * 100.0,
        slowest.as_secs_f64()
    ))
}

fn hover() -> Outcome {
    let mut worst = 0.0f64;
    for seed in [1, 2, 3] {
        let spec = SyntheticSpec { force_profile: ForceProfile::Hover, ..Default::default() };
        let sc = gen_synthetic(seed, &spec).map_err(|e| e.to_string())?;
        let (res, _) = infer(&sc)?;
        let weight = sc.object.mass * -sc.sim.gravity.z;
        for forces in &res.force_seq {
            let up: f64 = forces.forces().iter().map(|f| f.z).sum();
            worst = worst.max((up - weight).abs() / weight);
        }
    }
    ensure(worst < 0.05, || format!("upward force off by {:.2}%", worst * 100.0))?;
    Ok(format!("3 seeds, worst frame off m*g by {:.4}%", worst * 100.0))
}

fn geometry() -> Outcome {
    let camera = default_camera();
    let opts = SolverOptions::default();
    let mut worst_rot = 0.0f64;
    let mut worst_trans = 0.0f64;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kps: Vec<Vector3<f64>> = (0..10).map(|_| Vector3::from_fn(|_, _| rng.gen_range(-0.1..0.1))).collect();
        let pose = Pose::new(
            UnitQuaternion::from_euler_angles(rng.gen_range(-3.1..3.1), rng.gen_range(-1.5..1.5), rng.gen_range(-3.1..3.1)),
            Vector3::new(rng.gen_range(-0.2..0.2), rng.gen_range(1.5..2.5), rng.gen_range(-0.1..0.3)),
        );
        let pixels: Vec<Option<Vector2<f64>>> =
            project_points(&kps, &pose, &camera).map_err(|e| e.to_string())?.into_iter().map(Some).collect();
        let est = solve_pnp(&kps, &pixels, &camera, None, &opts).map_err(|e| e.to_string())?;
        worst_rot = worst_rot.max(est.rotation.angle_to(&pose.rotation).to_degrees());
        worst_trans = worst_trans.max((est.translation - pose.translation).norm());
    }
    ensure(worst_rot < 0.1 && worst_trans < 1e-3, || format!("pose error {worst_rot:.3e} deg, {worst_trans:.3e} m"))?;

    let mut worst_cp = 0.0f64;
    for seed in 0..5 {
        let sc = gen_synthetic(seed, &SyntheticSpec::default()).map_err(|e| e.to_string())?;
        let gt = sc.ground_truth.as_ref().unwrap();
        let tracks: Vec<_> = sc.observations.iter().map(|o| o.contact_pixels.clone()).collect();
        let est = solve_contact_points(&tracks, &gt.poses, &sc.camera, None, &opts).map_err(|e| e.to_string())?;
        for (e, truth) in est.into_iter().zip(&gt.contacts) {
            let e = e.map_err(|e| e.to_string())?;
            worst_cp = worst_cp.max((e.point - truth).norm());
        }
    }
    ensure(worst_cp < 1e-3, || format!("contact error {worst_cp:.3e} m"))?;

    let sc = gen_synthetic(0, &SyntheticSpec::default()).map_err(|e| e.to_string())?;
    let gt = sc.ground_truth.as_ref().unwrap();
    let single = solve_contact_points(&[sc.observations[0].contact_pixels.clone()], &gt.poses[..1], &sc.camera, None, &opts)
        .map_err(|e| e.to_string())?;
    let codes: Vec<&str> = single.iter().map(|r| r.as_ref().map_or_else(|e| e.code(), |_| "solved")).collect();
    ensure(codes.iter().all(|&c| c == "depth_unobservable"), || format!("single pose gave {codes:?}"))?;
    Ok(format!(
        "pose error {worst_rot:.1e} deg and {worst_trans:.1e} m, contact error {worst_cp:.1e} m, single pose depth_unobservable"
    ))
}

fn metrics() -> Outcome {
    let quarter = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2);
    let d = quaternion_distance(quarter.quaternion(), UnitQuaternion::identity().quaternion()).map_err(|e| e.to_string())?;
    let off = (d - std::f64::consts::FRAC_PI_2).abs();
    ensure(off <= 1e-9, || format!("distance off pi/2 by {off:.3e}"))?;

    for seed in 0..5 {
        let spec = SyntheticSpec { occlusion_rate: 0.2, ..Default::default() };
        let sc = gen_synthetic(seed, &spec).map_err(|e| e.to_string())?;
        let gt = sc.ground_truth.as_ref().unwrap();
        let contacts = gt.contact_set().map_err(|e| e.to_string())?;
        let forces = gt.force_seq().map_err(|e| e.to_string())?;
        let states =
            simulate_trajectory(&sc.initial_state, &forces, &contacts, &sc.object, &sc.sim).map_err(|e| e.to_string())?;
        let report = evaluate(&states[1..], &gt.poses, &sc.observations, &contacts, &contacts, &sc.object, &sc.camera)
            .map_err(|e| e.to_string())?;
        let values = [report.kp_error_px, report.rotation_error_rad, report.translation_error_m, report.cp_error_m];
        ensure(values.iter().all(|&v| v == 0.0), || format!("seed {seed}: report {values:?}"))?;
    }
    Ok(format!("distance off pi/2 by {off:.1e}, 5 generative scenarios evaluate to exactly zero"))
}

fn forcesolve(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_forcesolve"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
}

fn reproducible() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    forcesolve(d, &["--seed", "5", "gen-synthetic", "--noise", "0.5", "--out", "s.json"])?;
    forcesolve(d, &["--seed", "5", "infer-forces", "s.json", "--out", "base.json"])?;
    let runs: [&[&str]; 9] = [
        &["gen-synthetic", "--noise", "0.5", "--occlusion", "0.1"],
        &["simulate", "s.json", "--forces", "random"],
        &["grad-check", "s.json", "--forces", "random"],
        &["infer-forces", "s.json"],
        &["infer-forces", "s.json", "--step-rule", "adaptive", "--contacts", "solve"],
        &["solve-pose", "s.json"],
        &["solve-contacts", "s.json", "--poses", "solve"],
        &["eval", "s.json", "--results", "base.json"],
        &["--max-iters", "20", "infer-forces", "s.json", "--refine-contacts"],
    ];
    for (i, args) in runs.iter().enumerate() {
        let mut files = Vec::new();
        for attempt in 0..2 {
            let out = format!("run{i}-{attempt}.json");
            let mut full = vec!["--seed", "5", "--out", out.as_str()];
            full.extend_from_slice(args);
            forcesolve(d, &full)?;
            files.push(std::fs::read(d.join(&out)).map_err(|e| e.to_string())?);
        }
        ensure(files[0] == files[1], || format!("{args:?} wrote different bytes"))?;
    }
    Ok(format!("{} invocations each produced identical files", runs.len()))
}
