use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use forcesolve::geometry::ContactEstimate;
use forcesolve::optimizer::StepRule;
use forcesolve::scenario::{parse_scenario, ConfigEcho};
use forcesolve::{
    evaluate, gen_synthetic, grad_check, infer_forces, save_results, save_scenario, simulate_trajectory,
    solve_contact_points, solve_pnp, total_loss, ContactSet, FdConfig, FdScheme, ForceProfile, ForceSet, LoadMode,
    OptimizerOptions, Pose, PoseEstimate, ResultsFile, Scenario, SolverOptions, SyntheticSpec,
};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::{
    Cli, Command, ContactSource, EvalArgs, ForceSource, GenArgs, GlobalArgs, GradCheckArgs, InferArgs, PoseSource,
    Profile, Rule, Scheme, SimulateArgs, SolveContactsArgs,
};
use crate::CliError;

pub(crate) fn run(cli: &Cli) -> Result<String, CliError> {
    let g = &cli.global;
    match &cli.command {
        Command::Simulate(args) => simulate(g, args),
        Command::GradCheck(args) => grad_check_cmd(g, args),
        Command::InferForces(args) => infer(g, args),
        Command::SolvePose(args) => solve_pose(g, &args.scenario),
        Command::SolveContacts(args) => solve_contacts(g, args),
        Command::GenSynthetic(args) => generate(g, args),
        Command::Eval(args) => eval(g, args),
    }
}

struct Input {
    scenario: Scenario,
    sha256: String,
}

fn load_mode(g: &GlobalArgs) -> LoadMode {
    if g.lenient {
        LoadMode::Lenient
    } else {
        LoadMode::Strict
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::new("io_error", format!("{}: {e}", path.display())))
}

fn sha256(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn load(g: &GlobalArgs, path: &Path) -> Result<Input, CliError> {
    let text = read_text(path)?;
    let mut scenario = parse_scenario(&text, load_mode(g))?.value;
    if let Some(substeps) = g.substeps {
        if substeps == 0 {
            return Err(CliError::usage("--substeps must be at least 1"));
        }
        scenario.sim.substeps_per_frame = substeps;
    }
    Ok(Input { scenario, sha256: sha256(&text) })
}

fn fd_config(g: &GlobalArgs) -> Result<FdConfig, CliError> {
    let mut fd = FdConfig::default();
    if let Some(scheme) = g.fd_scheme {
        fd.scheme = match scheme {
            Scheme::Central => FdScheme::Central,
            Scheme::Forward => FdScheme::Forward,
        };
    }
    fd.h_force = g.h_force.unwrap_or(fd.h_force);
    fd.h_state = g.h_state.unwrap_or(fd.h_state);
    fd.h_contact = g.h_contact.unwrap_or(fd.h_contact);
    fd.validate()?;
    Ok(fd)
}

fn out_path(g: &GlobalArgs, default: &str) -> PathBuf {
    g.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn echo(input: &Input, options: BTreeMap<String, serde_json::Value>) -> ConfigEcho {
    ConfigEcho {
        scenario_sha256: Some(input.sha256.clone()),
        sim: Some(input.scenario.sim),
        options,
        ..Default::default()
    }
}

fn options<const N: usize>(pairs: [(&str, serde_json::Value); N]) -> BTreeMap<String, serde_json::Value> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn value_name<T: clap::ValueEnum>(v: &T) -> serde_json::Value {
    json!(v.to_possible_value().map(|p| p.get_name().to_string()))
}

fn finish(results: &ResultsFile, path: &Path, line: String) -> Result<String, CliError> {
    save_results(path, results)?;
    Ok(line)
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn missing_truth(what: &str) -> CliError {
    CliError::new("missing_ground_truth", format!("the scenario has no ground truth to take {what} from"))
}

fn truth_forces(sc: &Scenario) -> Result<(Vec<ForceSet>, ContactSet), CliError> {
    let gt = sc.ground_truth.as_ref().ok_or_else(|| missing_truth("forces"))?;
    Ok((gt.force_seq()?, gt.contact_set()?))
}

/// Force sequence and contacts to roll out, chosen by `source`.
fn forces_for(sc: &Scenario, source: ForceSource, seed: u64) -> Result<(Vec<ForceSet>, ContactSet), CliError> {
    let n = sc.n_frames;
    let contacts = || -> Result<ContactSet, CliError> {
        match &sc.ground_truth {
            Some(gt) => Ok(gt.contact_set()?),
            None => Ok(ContactSet::new(vec![Vector3::zeros()])?),
        }
    };
    match source {
        ForceSource::Truth => truth_forces(sc),
        ForceSource::Auto if sc.ground_truth.is_some() => truth_forces(sc),
        ForceSource::Auto | ForceSource::Zero => {
            let contacts = contacts()?;
            Ok((vec![ForceSet::zeros(contacts.len()); n], contacts))
        }
        ForceSource::Random => {
            let contacts = contacts()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let seq = (0..n)
                .map(|_| {
                    let f = (0..contacts.len()).map(|_| Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0))).collect();
                    ForceSet::new(f)
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok((seq, contacts))
        }
    }
}

fn simulate(g: &GlobalArgs, args: &SimulateArgs) -> Result<String, CliError> {
    let input = load(g, &args.scenario)?;
    let sc = &input.scenario;
    let (forces, contacts) = forces_for(sc, args.forces, g.seed)?;
    let states = simulate_trajectory(&sc.initial_state, &forces, &contacts, &sc.object, &sc.sim)?;
    let loss = total_loss(&sc.problem(), &forces, &contacts)?;

    let mut results = ResultsFile::new("simulate", g.seed, echo(&input, options([("forces", value_name(&args.forces))])));
    let drift = (states.last().expect("n + 1 states").position - sc.initial_state.position).norm();
    results.summary.insert("loss".into(), loss);
    results.summary.insert("displacement_m".into(), drift);
    results.force_seq = Some(forces.iter().map(|f| f.forces().to_vec()).collect());
    results.contacts = Some(contacts.points().to_vec());
    results.states = Some(states);
    let line = format!("simulate: {} frames, loss {loss:.6e} px^2, displacement {drift:.6} m", sc.n_frames);
    finish(&results, &out_path(g, "simulate.results.json"), line)
}

fn grad_check_cmd(g: &GlobalArgs, args: &GradCheckArgs) -> Result<String, CliError> {
    let input = load(g, &args.scenario)?;
    let sc = &input.scenario;
    let fd = fd_config(g)?;
    let (forces, contacts) = forces_for(sc, args.forces, g.seed)?;
    let report = grad_check(&sc.problem(), &forces, &contacts, &fd, args.step)?;

    let opts = options([("forces", value_name(&args.forces)), ("step", json!(args.step))]);
    let mut results = ResultsFile::new("grad-check", g.seed, ConfigEcho { fd: Some(fd), ..echo(&input, opts) });
    results.summary.insert("loss".into(), report.loss);
    results.summary.insert("max_relative_error".into(), report.max_relative_error);
    results.summary.insert("max_abs_error".into(), report.max_abs_error);
    let line = format!(
        "grad-check: {} coordinates, max relative error {:.3e}, loss {:.6e} px^2",
        report.coordinates, report.max_relative_error, report.loss
    );
    results.grad_check = Some(report);
    finish(&results, &out_path(g, "grad-check.results.json"), line)
}

fn solve_poses(sc: &Scenario, opts: &SolverOptions) -> Vec<Option<PoseEstimate>> {
    let kps = sc.object.keypoint_positions();
    sc.observations
        .iter()
        .map(|obs| solve_pnp(&kps, &obs.keypoint_pixels, &sc.camera, None, opts).ok())
        .collect()
}

/// Per-frame object poses for the contact solve; frames without a pose are
/// `None`.
fn poses_for(sc: &Scenario, source: PoseSource, opts: &SolverOptions) -> Result<Vec<Option<Pose>>, CliError> {
    let truth = || sc.ground_truth.as_ref().map(|gt| gt.poses.iter().copied().map(Some).collect());
    match source {
        PoseSource::Truth => truth().ok_or_else(|| missing_truth("poses")),
        PoseSource::Auto if sc.ground_truth.is_some() => Ok(truth().expect("checked")),
        PoseSource::Auto | PoseSource::Solve => {
            Ok(solve_poses(sc, opts).into_iter().map(|p| p.map(|p| p.pose())).collect())
        }
    }
}

fn contact_estimates(
    sc: &Scenario,
    source: PoseSource,
    opts: &SolverOptions,
) -> Result<Vec<ContactEstimate>, CliError> {
    if sc.observations.iter().all(|o| o.contact_pixels.is_empty()) {
        return Err(CliError::new("missing_contact_tracks", "the scenario has no contact pixel tracks"));
    }
    let poses = poses_for(sc, source, opts)?;
    let (tracks, poses): (Vec<_>, Vec<_>) = sc
        .observations
        .iter()
        .zip(poses)
        .filter_map(|(obs, pose)| pose.map(|p| (obs.contact_pixels.clone(), p)))
        .unzip();
    let estimates = solve_contact_points(&tracks, &poses, &sc.camera, None, opts)?;
    Ok(estimates.into_iter().collect::<Result<Vec<_>, _>>()?)
}

fn contacts_for(sc: &Scenario, source: ContactSource) -> Result<ContactSet, CliError> {
    let solved = || -> Result<ContactSet, CliError> {
        let est = contact_estimates(sc, PoseSource::Solve, &SolverOptions::default())?;
        Ok(ContactSet::new(est.into_iter().map(|e| e.point).collect())?)
    };
    match (source, &sc.ground_truth) {
        (ContactSource::Truth, None) => Err(missing_truth("contacts")),
        (ContactSource::Truth | ContactSource::Auto, Some(gt)) => Ok(gt.contact_set()?),
        (ContactSource::Auto, None) | (ContactSource::Solve, _) => solved(),
    }
}

fn infer(g: &GlobalArgs, args: &InferArgs) -> Result<String, CliError> {
    let input = load(g, &args.scenario)?;
    let sc = &input.scenario;
    let fd = fd_config(g)?;
    let contacts = contacts_for(sc, args.contacts)?;
    let mut opts = OptimizerOptions {
        seed: g.seed,
        refine_contacts: args.refine_contacts,
        step_rule: match args.step_rule {
            Rule::GaussNewton => StepRule::GaussNewton,
            Rule::Adaptive => StepRule::Adaptive,
        },
        ..Default::default()
    };
    if let Some(max) = g.max_iters {
        opts.max_iterations = max;
    }
    let res = infer_forces(&sc.problem(), &contacts, &opts, &fd)?;

    let report = match &sc.ground_truth {
        Some(gt) => Some(evaluate(
            &res.simulated_states[1..],
            &gt.poses,
            &sc.observations,
            &res.contacts,
            &gt.contact_set()?,
            &sc.object,
            &sc.camera,
        )?),
        None => None,
    };

    let echo_opts = options([("contacts", value_name(&args.contacts))]);
    let config = ConfigEcho { fd: Some(fd), optimizer: Some(opts), ..echo(&input, echo_opts) };
    let mut results = ResultsFile::new("infer-forces", g.seed, config);
    let kp = mean(res.per_frame_kp_error.iter().copied());
    results.summary.insert("loss".into(), res.best_loss);
    results.summary.insert("kp_error_px".into(), kp);
    results.summary.insert("iterations".into(), res.iterations as f64);
    results.force_seq = Some(res.force_seq.iter().map(|f| f.forces().to_vec()).collect());
    results.contacts = Some(res.contacts.points().to_vec());
    results.states = Some(res.simulated_states);
    results.loss_history = Some(res.loss_history);
    results.converged = Some(res.converged);
    results.report = report;
    let line = format!(
        "infer-forces: loss {:.6e} px^2, kp_error {kp:.4} px, {} iterations, converged {}",
        res.best_loss, res.iterations, res.converged
    );
    finish(&results, &out_path(g, "infer-forces.results.json"), line)
}

fn solve_pose(g: &GlobalArgs, path: &Path) -> Result<String, CliError> {
    let input = load(g, path)?;
    let sc = &input.scenario;
    let poses = solve_poses(sc, &SolverOptions::default());

    let mut results = ResultsFile::new("solve-pose", g.seed, echo(&input, BTreeMap::new()));
    let solved: Vec<&PoseEstimate> = poses.iter().flatten().collect();
    let residual = mean(solved.iter().map(|p| p.residual_px));
    results.summary.insert("frames_solved".into(), solved.len() as f64);
    results.summary.insert("mean_residual_px".into(), residual);
    let mut line = format!("solve-pose: {}/{} frames, mean residual {residual:.4} px", solved.len(), poses.len());
    if let Some(gt) = &sc.ground_truth {
        let pairs: Vec<_> = poses.iter().zip(&gt.poses).filter_map(|(p, t)| p.as_ref().map(|p| (p, t))).collect();
        let rot = mean(pairs.iter().map(|(p, t)| p.rotation.angle_to(&t.rotation)));
        let trans = mean(pairs.iter().map(|(p, t)| (p.translation - t.translation).norm()));
        results.summary.insert("rotation_error_rad".into(), rot);
        results.summary.insert("translation_error_m".into(), trans);
        line.push_str(&format!(", rotation error {:.4} deg, translation error {trans:.6} m", rot.to_degrees()));
    }
    results.poses = Some(poses);
    finish(&results, &out_path(g, "solve-pose.results.json"), line)
}

fn solve_contacts(g: &GlobalArgs, args: &SolveContactsArgs) -> Result<String, CliError> {
    let input = load(g, &args.scenario)?;
    let sc = &input.scenario;
    let estimates = contact_estimates(sc, args.poses, &SolverOptions::default())?;

    let mut results =
        ResultsFile::new("solve-contacts", g.seed, echo(&input, options([("poses", value_name(&args.poses))])));
    let residual = mean(estimates.iter().map(|e| e.residual_px));
    results.summary.insert("mean_residual_px".into(), residual);
    let mut line = format!("solve-contacts: {} contacts, mean residual {residual:.4} px", estimates.len());
    if let Some(gt) = &sc.ground_truth {
        let err = mean(estimates.iter().zip(&gt.contacts).map(|(e, t)| (e.point - t).abs().sum()));
        results.summary.insert("cp_error_m".into(), err);
        line.push_str(&format!(", cp error {err:.6} m"));
    }
    results.contact_residuals_px = Some(estimates.iter().map(|e| Some(e.residual_px)).collect());
    results.contacts = Some(estimates.into_iter().map(|e| e.point).collect());
    finish(&results, &out_path(g, "solve-contacts.results.json"), line)
}

fn generate(g: &GlobalArgs, args: &GenArgs) -> Result<String, CliError> {
    let spec = SyntheticSpec {
        n_frames: args.frames,
        k: args.k,
        force_profile: match args.profile {
            Profile::Zero => ForceProfile::Zero,
            Profile::Constant => ForceProfile::Constant,
            Profile::SmoothRandom => ForceProfile::SmoothRandom,
            Profile::Hover => ForceProfile::Hover,
        },
        noise_px: args.noise,
        occlusion_rate: args.occlusion,
        max_force: args.max_force,
        object: args.object.clone(),
        ..Default::default()
    };
    let mut scenario = gen_synthetic(g.seed, &spec)?;
    if let Some(substeps) = g.substeps {
        if substeps != scenario.sim.substeps_per_frame {
            return Err(CliError::usage("gen-synthetic always uses the default substep count"));
        }
    }
    scenario.name = Some(format!("synthetic-{}", g.seed));
    let path = out_path(g, "synthetic.json");
    save_scenario(&path, &scenario)?;
    Ok(format!(
        "gen-synthetic: seed {}, {} frames, {} contacts, object {}",
        g.seed,
        scenario.n_frames,
        spec.k,
        scenario.object.name.as_deref().unwrap_or("random")
    ))
}

fn eval(g: &GlobalArgs, args: &EvalArgs) -> Result<String, CliError> {
    let input = load(g, &args.scenario)?;
    let sc = &input.scenario;
    let text = read_text(&args.results)?;
    let inferred = forcesolve::scenario::parse_document::<ResultsFile>(&text, load_mode(g))?.value;
    let invalid = |what: &str| CliError::new("invalid_results", format!("results file has no {what}"));
    let force_seq = inferred
        .force_seq
        .as_ref()
        .ok_or_else(|| invalid("force_seq"))?
        .iter()
        .map(|f| ForceSet::with_bound(f.clone(), f64::MAX))
        .collect::<Result<Vec<_>, _>>()?;
    let predicted = ContactSet::new(inferred.contacts.clone().ok_or_else(|| invalid("contacts"))?)?;
    let states = simulate_trajectory(&sc.initial_state, &force_seq, &predicted, &sc.object, &sc.sim)?;

    let (reference, truth_cp) = match &sc.ground_truth {
        Some(gt) => (gt.poses.clone(), gt.contact_set()?),
        None => {
            let opts = SolverOptions::default();
            let poses = solve_poses(sc, &opts)
                .into_iter()
                .enumerate()
                .map(|(t, p)| {
                    p.map(|p| p.pose())
                        .ok_or_else(|| CliError::new("no_reference_pose", format!("frame {}: pose could not be solved", t + 1)))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let cp = contact_estimates(sc, PoseSource::Solve, &opts)?;
            (poses, ContactSet::new(cp.into_iter().map(|e| e.point).collect())?)
        }
    };
    let report = evaluate(&states[1..], &reference, &sc.observations, &predicted, &truth_cp, &sc.object, &sc.camera)?;

    let opts = options([("results_sha256", json!(sha256(&text)))]);
    let mut results = ResultsFile::new("eval", g.seed, echo(&input, opts));
    results.summary.insert("kp_error_px".into(), report.kp_error_px);
    results.summary.insert("rotation_error_rad".into(), report.rotation_error_rad);
    results.summary.insert("translation_error_m".into(), report.translation_error_m);
    results.summary.insert("cp_error_m".into(), report.cp_error_m);
    let line = format!(
        "eval: kp_error {:.4} px, rotation error {:.6} rad, translation error {:.6} m, cp error {:.6} m",
        report.kp_error_px, report.rotation_error_rad, report.translation_error_m, report.cp_error_m
    );
    results.report = Some(report);
    finish(&results, &out_path(g, "eval.results.json"), line)
}
