//! Scenario files.
//!
//! Paths inside a scenario (robot models, pruning table) are resolved
//! relative to the directory of the scenario file.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::collision::{build_pair_set, PruningTable, SmoothProjection, StaticEnvironment};
use crate::config::load_model;
use crate::coordinator::DeadlockParams;
use crate::dynamics::JointState;
use crate::error::{Error, Result};
use crate::kinematics::{ManipulatorModel, Pose};
use crate::ocp::{AgentConfig, CostWeights, SolverSettings};

/// How predictions travel between agents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    /// Lossless in-process queues.
    #[default]
    Inproc,
    /// UDP datagrams over the loopback interface.
    Udp,
}

impl std::str::FromStr for TransportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inproc" => Ok(Self::Inproc),
            "udp" => Ok(Self::Udp),
            other => Err(Error::InvalidScenario(format!("unknown transport {other:?} (inproc or udp)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsFile {
    /// Diagonal of `Q_x`, positions then velocities.
    pub qx: Vec<f64>,
    #[serde(default = "default_terminal_factor")]
    pub terminal_factor: f64,
    #[serde(default = "one")]
    pub ru: f64,
    #[serde(default = "one")]
    pub rd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeadlockFile {
    #[serde(default = "default_eps_v")]
    pub eps_v: f64,
    #[serde(default = "default_delta_x")]
    pub delta_x: f64,
    #[serde(default = "default_d_min")]
    pub d_min: f64,
    #[serde(default = "default_eps_res")]
    pub eps_res: f64,
    #[serde(default = "default_hold_timeout")]
    pub hold_timeout: u64,
}

impl Default for DeadlockFile {
    fn default() -> Self {
        let p = DeadlockParams::default();
        Self { eps_v: p.eps_v, delta_x: p.delta_x, d_min: p.d_min, eps_res: p.eps_res, hold_timeout: p.hold_timeout }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFile {
    /// Joint-space target; the target velocity is zero.
    pub target: Vec<f64>,
    /// Grasp or place dwell after arrival; defaults to the scenario value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dwell: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotFile {
    pub model: String,
    pub base: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
    /// Initial joint positions; the robot starts at rest.
    pub initial: Vec<f64>,
    #[serde(default)]
    pub task: Vec<TaskFile>,
}

/// The on-disk scenario layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub horizon: usize,
    pub ts: f64,
    pub step_budget: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub transport: TransportKind,
    #[serde(default = "default_table_height")]
    pub table_height: f64,
    #[serde(default = "default_clearance")]
    pub table_clearance: f64,
    #[serde(default = "default_c")]
    pub projection_c: f64,
    #[serde(default)]
    pub collision_margin: f64,
    #[serde(default = "default_dwell")]
    pub dwell_steps: u64,
    /// Pruning table; every ellipsoid/segment combination is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pruning: Option<String>,
    pub weights: WeightsFile,
    #[serde(default)]
    pub deadlock: DeadlockFile,
    pub robot: Vec<RobotFile>,
}

fn default_terminal_factor() -> f64 {
    10.0
}
fn one() -> f64 {
    1.0
}
fn default_eps_v() -> f64 {
    DeadlockParams::default().eps_v
}
fn default_delta_x() -> f64 {
    DeadlockParams::default().delta_x
}
fn default_d_min() -> f64 {
    DeadlockParams::default().d_min
}
fn default_eps_res() -> f64 {
    DeadlockParams::default().eps_res
}
fn default_hold_timeout() -> u64 {
    DeadlockParams::default().hold_timeout
}
fn default_table_height() -> f64 {
    StaticEnvironment::default().table_height
}
fn default_clearance() -> f64 {
    StaticEnvironment::default().clearance
}
fn default_c() -> f64 {
    SmoothProjection::default().c
}
fn default_dwell() -> u64 {
    5
}

/// One pick or place target.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub target: JointState,
    pub dwell: u64,
}

#[derive(Debug, Clone)]
pub struct RobotSetup {
    /// Model placed at its base pose.
    pub model: Arc<ManipulatorModel>,
    pub initial: JointState,
    pub tasks: Vec<Task>,
}

/// A fully resolved scenario.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub name: String,
    pub robots: Vec<RobotSetup>,
    pub horizon: usize,
    pub ts: f64,
    pub weights: WeightsFile,
    pub env: StaticEnvironment,
    pub proj: SmoothProjection,
    pub collision_margin: f64,
    pub deadlock: DeadlockParams,
    pub seed: u64,
    pub transport: TransportKind,
    pub step_budget: u64,
    pub pruning: Option<PruningTable>,
    pub solver: SolverSettings,
}

impl ScenarioConfig {
    /// Parses a scenario; relative paths are resolved against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path, origin: &str) -> Result<Self> {
        let file: ScenarioFile =
            toml::from_str(text).map_err(|e| Error::Parse { path: origin.into(), message: e.to_string() })?;
        Self::from_file(file, base_dir)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        Self::from_toml_str(&text, &dir, &path.display().to_string())
    }

    pub fn from_file(file: ScenarioFile, base_dir: &Path) -> Result<Self> {
        let mut robots = Vec::with_capacity(file.robot.len());
        for r in &file.robot {
            let model = load_model(&base_dir.join(&r.model))?;
            let pose = Pose::from_position_yaw(Vector3::from(r.base), r.yaw);
            let tasks = r
                .task
                .iter()
                .map(|t| Task { target: JointState::at_rest(&t.target), dwell: t.dwell.unwrap_or(file.dwell_steps) })
                .collect();
            robots.push(RobotSetup {
                model: Arc::new(model.with_base_pose(pose)),
                initial: JointState::at_rest(&r.initial),
                tasks,
            });
        }
        let pruning = match &file.pruning {
            Some(p) => Some(PruningTable::load(&base_dir.join(p))?),
            None => None,
        };
        let d = &file.deadlock;
        let scenario = Self {
            name: file.name.clone(),
            robots,
            horizon: file.horizon,
            ts: file.ts,
            weights: file.weights.clone(),
            env: StaticEnvironment::new(file.table_height, file.table_clearance)?,
            proj: SmoothProjection::new(file.projection_c)?,
            collision_margin: file.collision_margin,
            deadlock: DeadlockParams {
                eps_v: d.eps_v,
                delta_x: d.delta_x,
                d_min: d.d_min,
                eps_res: d.eps_res,
                hold_timeout: d.hold_timeout,
            },
            seed: file.seed,
            transport: file.transport,
            step_budget: file.step_budget,
            pruning,
            solver: SolverSettings::default(),
        };
        scenario.validate()?;
        Ok(scenario)
    }

    /// Checks the scenario invariants; the error names the first violation.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidScenario(format!("{}: {msg}", self.name)));
        if self.robots.is_empty() {
            return bad("at least one robot is required".into());
        }
        if self.step_budget == 0 {
            return bad("step budget must be positive".into());
        }
        if self.horizon < 2 {
            return bad(format!("horizon must be at least 2, got {}", self.horizon));
        }
        if !(self.ts.is_finite() && self.ts > 0.0) {
            return bad(format!("sampling time must be positive, got {}", self.ts));
        }
        if !(self.collision_margin.is_finite() && self.collision_margin >= 0.0) {
            return bad("collision margin must be non-negative".into());
        }
        self.deadlock.validate()?;
        for (i, r) in self.robots.iter().enumerate() {
            r.model.validate()?;
            let n = r.model.dof();
            if self.weights.qx.len() != 2 * n {
                return bad(format!("weights.qx has {} entries, robot {i} needs {}", self.weights.qx.len(), 2 * n));
            }
            check_joints(&self.name, i, "initial state", &r.model, &r.initial.q)?;
            for (t, task) in r.tasks.iter().enumerate() {
                check_joints(&self.name, i, &format!("task {t} target"), &r.model, &task.target.q)?;
            }
        }
        self.weights()?;
        Ok(())
    }

    pub fn weights(&self) -> Result<CostWeights> {
        CostWeights::with_terminal_factor(&self.weights.qx, self.weights.terminal_factor, self.weights.ru, self.weights.rd)
    }

    pub fn models(&self) -> Vec<Arc<ManipulatorModel>> {
        self.robots.iter().map(|r| r.model.clone()).collect()
    }

    /// One agent configuration per robot, including its collision pairs.
    pub fn agent_configs(&self) -> Result<Vec<AgentConfig>> {
        let models: Vec<ManipulatorModel> = self.robots.iter().map(|r| (*r.model).clone()).collect();
        let pair_sets = build_pair_set(&models, self.pruning.as_ref())?;
        let weights = self.weights()?;
        self.robots
            .iter()
            .zip(pair_sets)
            .enumerate()
            .map(|(i, (r, pairs))| {
                let mut a = AgentConfig::new(i, r.model.clone(), weights.clone(), self.horizon, self.ts)?;
                a.pair_set = pairs;
                a.env = self.env;
                a.proj = self.proj;
                a.collision_margin = self.collision_margin;
                a.solver = self.solver;
                Ok(a)
            })
            .collect()
    }

    /// The scenario restricted to its first `count` robots.
    pub fn with_robot_count(&self, count: usize) -> Result<Self> {
        let keep: Vec<usize> = (0..count).collect();
        self.subset(&keep)
    }

    /// The scenario restricted to the listed robots, renumbered in list order.
    pub fn subset(&self, keep: &[usize]) -> Result<Self> {
        if keep.is_empty() || keep.iter().any(|&i| i >= self.robots.len()) {
            return Err(Error::InvalidScenario(format!(
                "{}: cannot keep robots {keep:?} of {}",
                self.name,
                self.robots.len()
            )));
        }
        let mut out = self.clone();
        out.robots = keep.iter().map(|&i| self.robots[i].clone()).collect();
        out.name = format!("{}{keep:?}", self.name);
        Ok(out)
    }

    /// Neutral states `x^D` of all robots.
    pub fn neutral_states(&self) -> Vec<JointState> {
        self.robots.iter().map(|r| JointState::at_rest(&r.model.neutral_pose)).collect()
    }
}

fn check_joints(scenario: &str, robot: usize, what: &str, model: &ManipulatorModel, q: &DVector<f64>) -> Result<()> {
    if q.len() != model.dof() {
        return Err(Error::InvalidScenario(format!(
            "{scenario}: robot {robot} {what} has {} joints, model has {}",
            q.len(),
            model.dof()
        )));
    }
    for (j, (&v, &(lo, hi))) in q.iter().zip(&model.joint_limits).enumerate() {
        if !(v >= lo && v <= hi) {
            return Err(Error::InvalidScenario(format!(
                "{scenario}: robot {robot} {what}: joint {} value {v} outside limits [{lo}, {hi}]",
                j + 1
            )));
        }
    }
    Ok(())
}
