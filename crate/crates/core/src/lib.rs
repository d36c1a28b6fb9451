//! Contact force inference for a rigid object from keypoint tracks.
//!
//! Forces at fixed contact points are recovered by rolling a rigid-body
//! simulator forward, projecting the object's keypoints into a static camera
//! and descending the reprojection error. The simulator is differentiated by
//! finite differences and gradients are chained backwards through time.

pub mod finite_diff;
pub mod geometry;
pub mod metrics;
pub mod objects;
pub mod optimizer;
pub mod physics;
pub mod projection;
pub mod scenario;
mod serde_util;
pub mod synthetic;

pub use finite_diff::{
    loss_gradient_single_frame, step_jacobians, step_jacobians_with, FdConfig, FdError, FdScheme,
    RigidBodySimulator, Simulator, StepJacobians,
};
pub use physics::{
    net_wrench, simulate_trajectory, step, ContactSet, ForceSet, Keypoint, LinearScheme,
    ObjectModel, PhysicsError, RigidBodyState, SimulationConfig,
};
pub use geometry::{
    solve_contact_points, solve_pnp, ContactEstimate, GeometryError, PoseEstimate, SolverOptions,
};
pub use metrics::{evaluate, quaternion_distance, EvalReport, MetricsError};
pub use optimizer::{
    evaluate_with_gradients, grad_check, infer_forces, loss_gradients, total_loss, GradCheckReport,
    InferenceResult, LossGradients, OptimizerError, OptimizerOptions, TrajectoryProblem,
};
pub use projection::{
    cp_loss, force_mse, keypoint_loss, project_points, Camera, FrameObservation, Pose,
    ProjectionError,
};
pub use scenario::{
    load_scenario, save_results, save_scenario, GroundTruth, LoadMode, ResultsFile, Scenario,
    ScenarioError,
};
pub use synthetic::{gen_synthetic, ForceProfile, SyntheticError, SyntheticSpec};
