//! Deterministic scenario simulation, auditing and scenario generation tools.

pub mod audit;
pub mod generate;
pub mod ik;
pub mod log;
pub mod metrics;
pub mod rsa;
pub mod run;
pub mod scenario;

pub use audit::{audit_clearance, open_loop_log, ClearanceAudit, Geometry};
pub use generate::{generate_scenario, joint_target, module_layout, shared_region, GenRequest, GRASP_HEIGHT};
pub use ik::{ik_solve, IK_MAX_ITERATIONS, IK_TOLERANCE};
pub use log::{ControlMode, DeadlockEvent, ReleaseEvent, RobotRecord, SimLog, StepRecord};
pub use metrics::{mean_std, metrics, pooled_solve_time, rms_deviation, Metrics, SolveTiming};
pub use rsa::{place_objects_rsa, Region, MAX_REJECTIONS};
pub use run::{logged_inputs, run, run_centralized, run_with_endpoints};
pub use scenario::{DeadlockFile, RobotFile, RobotSetup, ScenarioConfig, ScenarioFile, Task, TaskFile, TransportKind, WeightsFile};
