//! Command-line front end: every subcommand reads a scenario, writes one
//! JSON results file and prints a one-line summary.
//!
//! Failures are reported on stderr as `{"error": {"code", "message"}}` with
//! exit status 1. Malformed command lines print usage and exit with 2.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod error;

pub use error::CliError;

/// Environment variable bounding the worker threads of one run.
pub const THREADS_ENV: &str = "FORCESOLVE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "forcesolve", version, about = "Infer contact forces on a rigid object from keypoint tracks")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Seed for every randomized choice of the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, value_enum)]
    pub fd_scheme: Option<Scheme>,
    /// Finite-difference step for force coordinates (N).
    #[arg(long, global = true)]
    pub h_force: Option<f64>,
    /// Finite-difference step for state coordinates.
    #[arg(long, global = true)]
    pub h_state: Option<f64>,
    /// Finite-difference step for contact coordinates (m).
    #[arg(long, global = true)]
    pub h_contact: Option<f64>,
    /// Integrator substeps per frame, overriding the scenario.
    #[arg(long, global = true)]
    pub substeps: Option<usize>,
    #[arg(long, global = true)]
    pub max_iters: Option<usize>,
    /// Results file to write.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Accept unknown fields in input files, with a warning.
    #[arg(long, global = true)]
    pub lenient: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scheme {
    Central,
    Forward,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll the scenario forward under a force sequence.
    Simulate(SimulateArgs),
    /// Compare adjoint gradients with differences of the total loss.
    GradCheck(GradCheckArgs),
    /// Recover per-frame contact forces from the keypoint tracks.
    InferForces(InferArgs),
    /// Recover the object pose of every frame from its keypoints.
    SolvePose(ScenarioArg),
    /// Recover object-frame contact points from the contact tracks.
    SolveContacts(SolveContactsArgs),
    /// Write a synthetic scenario with embedded ground truth.
    GenSynthetic(GenArgs),
    /// Score a force-inference results file against the scenario.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct ScenarioArg {
    pub scenario: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ForceSource {
    /// Ground-truth forces when present, zero otherwise. Without ground
    /// truth the forces act on a single contact at the centre of mass.
    Auto,
    Truth,
    Zero,
    /// Uniform in [-1, 1] N per coordinate, drawn from the seed.
    Random,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    pub scenario: PathBuf,
    #[arg(long, value_enum, default_value_t = ForceSource::Auto)]
    pub forces: ForceSource,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    pub scenario: PathBuf,
    #[arg(long, value_enum, default_value_t = ForceSource::Zero)]
    pub forces: ForceSource,
    /// Step of the reference central differences (N).
    #[arg(long, default_value_t = 1e-4)]
    pub step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ContactSource {
    /// Ground-truth contacts when present, solved otherwise.
    Auto,
    Truth,
    Solve,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Rule {
    GaussNewton,
    Adaptive,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    pub scenario: PathBuf,
    #[arg(long, value_enum, default_value_t = ContactSource::Auto)]
    pub contacts: ContactSource,
    #[arg(long, value_enum, default_value_t = Rule::GaussNewton)]
    pub step_rule: Rule,
    /// Also refine the contact points during descent.
    #[arg(long)]
    pub refine_contacts: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PoseSource {
    /// Ground-truth poses when present, solved otherwise.
    Auto,
    Truth,
    Solve,
}

#[derive(Debug, Args)]
pub struct SolveContactsArgs {
    pub scenario: PathBuf,
    #[arg(long, value_enum, default_value_t = PoseSource::Auto)]
    pub poses: PoseSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    Zero,
    Constant,
    SmoothRandom,
    Hover,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 10)]
    pub frames: usize,
    /// Number of contacts.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = Profile::SmoothRandom)]
    pub profile: Profile,
    /// Standard deviation of pixel noise.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.0)]
    pub occlusion: f64,
    /// Largest planted force (N).
    #[arg(long, default_value_t = 5.0)]
    pub max_force: f64,
    /// Bundled object instead of a random one.
    #[arg(long)]
    pub object: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub scenario: PathBuf,
    /// Results file written by `infer-forces`.
    #[arg(long)]
    pub results: PathBuf,
}

/// Runs the tool on `argv` (program name first) and returns the exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = thread_pool().and_then(|pool| pool.install(|| commands::run(&cli)));
    match result {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}

fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(value) = std::env::var(THREADS_ENV) {
        let threads: usize = value
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::usage(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
        builder = builder.num_threads(threads);
    }
    builder.build().map_err(|e| CliError::new("thread_pool", e.to_string()))
}
