//! Clearance evaluation on sampled and continuous plant trajectories.

use crate::collision::{els_margin_exact, min_link_distance, CollisionPairSet};
use crate::dynamics::{ControlInput, JointState};
use crate::error::{Error, Result};
use crate::kinematics::{ChainPose, Ellipsoid, LineSegment, ManipulatorModel};
use crate::sim::log::SimLog;
use crate::sim::scenario::ScenarioConfig;

/// Segments and ellipsoids of every robot at one configuration.
pub struct Geometry {
    pub segments: Vec<Vec<LineSegment>>,
    pub ellipsoids: Vec<Vec<Ellipsoid>>,
}

impl Geometry {
    pub fn new(models: &[impl AsRef<ManipulatorModel>], q: &[&[f64]]) -> Result<Self> {
        let mut segments = Vec::with_capacity(models.len());
        let mut ellipsoids = Vec::with_capacity(models.len());
        for (m, q) in models.iter().zip(q) {
            let m = m.as_ref();
            let pose = ChainPose::new(m, q)?;
            segments.push(m.segments.iter().map(|s| pose.segment(s)).collect());
            ellipsoids.push(m.ellipsoids.iter().map(|e| pose.ellipsoid(e)).collect());
        }
        Ok(Self { segments, ellipsoids })
    }

    /// Smallest exact ELS margin over the constrained pairs of every robot.
    pub fn min_els_margin(&self, pair_sets: &[CollisionPairSet]) -> f64 {
        let mut min = f64::INFINITY;
        for (i, set) in pair_sets.iter().enumerate() {
            for p in &set.pairs {
                let g = els_margin_exact(&self.segments[i][p.segment], &self.ellipsoids[p.other][p.ellipsoid]);
                min = min.min(g);
            }
        }
        min
    }

    /// Smallest segment–segment distance between different robots.
    pub fn min_link_distance(&self) -> f64 {
        let m = self.segments.len();
        let mut min = f64::INFINITY;
        for i in 0..m {
            for j in i + 1..m {
                min = min.min(min_link_distance(&self.segments[i], &self.segments[j]));
            }
        }
        min
    }
}

/// Result of re-evaluating a run between its sampling instants.
#[derive(Debug, Clone, PartialEq)]
pub struct ClearanceAudit {
    pub substeps: usize,
    /// Minimum ELS margin of each step over its substeps.
    pub per_step_min_margin: Vec<f64>,
    pub min_margin: f64,
    pub min_link_distance: f64,
    /// Minimum over the sampling instants only.
    pub sampled_min_margin: f64,
}

/// Evaluates ELS margins and link distances on the exact zero-order-hold
/// trajectory `q + q̇τ + ½uτ²`, `τ = s·T_s/substeps`, `s = 0..=substeps`.
pub fn audit_clearance(log: &SimLog, scenario: &ScenarioConfig, substeps: usize) -> Result<ClearanceAudit> {
    if substeps == 0 {
        return Err(Error::InvalidScenario("audit needs at least one substep".into()));
    }
    let models = scenario.models();
    let pair_sets: Vec<CollisionPairSet> = scenario.agent_configs()?.into_iter().map(|a| a.pair_set).collect();
    let mut per_step = Vec::with_capacity(log.steps.len());
    let mut min_link = f64::INFINITY;
    let mut sampled = f64::INFINITY;
    for s in &log.steps {
        let mut step_min = f64::INFINITY;
        for k in 0..=substeps {
            let tau = log.ts * k as f64 / substeps as f64;
            let q: Vec<Vec<f64>> = s
                .robots
                .iter()
                .map(|r| {
                    (0..r.x_s.dof()).map(|j| r.x_s.q[j] + r.x_s.qd[j] * tau + 0.5 * r.u[j] * tau * tau).collect()
                })
                .collect();
            let refs: Vec<&[f64]> = q.iter().map(Vec::as_slice).collect();
            let g = Geometry::new(&models, &refs)?;
            let margin = g.min_els_margin(&pair_sets);
            if k == 0 {
                sampled = sampled.min(margin);
            }
            step_min = step_min.min(margin);
            min_link = min_link.min(g.min_link_distance());
        }
        per_step.push(step_min);
    }
    let min_margin = per_step.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(ClearanceAudit { substeps, per_step_min_margin: per_step, min_margin, min_link_distance: min_link, sampled_min_margin: sampled })
}

/// Log of an open-loop run: every robot starts from its initial state and
/// applies `inputs[k][robot]` at step `k`.
pub fn open_loop_log(scenario: &ScenarioConfig, inputs: &[Vec<ControlInput>]) -> Result<SimLog> {
    use crate::sim::log::{ControlMode, RobotRecord, StepRecord};
    let configs = scenario.agent_configs()?;
    let models = scenario.models();
    let pair_sets: Vec<CollisionPairSet> = configs.iter().map(|a| a.pair_set.clone()).collect();
    let mut x: Vec<JointState> = scenario.robots.iter().map(|r| r.initial.clone()).collect();
    let mut steps = Vec::with_capacity(inputs.len());
    for (k, us) in inputs.iter().enumerate() {
        if us.len() != x.len() {
            return Err(Error::Dimension(format!("step {k} has {} inputs for {} robots", us.len(), x.len())));
        }
        let refs: Vec<&[f64]> = x.iter().map(|s| s.q.as_slice()).collect();
        let g = Geometry::new(&models, &refs)?;
        let robots = x
            .iter()
            .zip(us)
            .enumerate()
            .map(|(i, (s, u))| RobotRecord {
                robot_id: i,
                x_s: s.clone(),
                u: u.clone(),
                objective: f64::NAN,
                solve_time: None,
                gamma_d: false,
                gamma_r: true,
                target_id: 0,
                velocity_change: 0.0,
                residuum: f64::NAN,
                fallback: false,
            })
            .collect();
        steps.push(StepRecord {
            step: k as u64,
            time: k as f64 * scenario.ts,
            robots,
            min_els_margin: g.min_els_margin(&pair_sets),
            min_link_distance: g.min_link_distance(),
        });
        x = x.iter().zip(us).zip(&configs).map(|((s, u), c)| c.dynamics.step(s, u)).collect();
    }
    Ok(SimLog {
        scenario: scenario.name.clone(),
        mode: ControlMode::Distributed,
        ts: scenario.ts,
        horizon: scenario.horizon,
        steps,
        final_states: x,
        tasks_completed: vec![0; scenario.robots.len()],
        task_counts: scenario.robots.iter().map(|r| r.tasks.len()).collect(),
        execution_steps: None,
        safety_stop: false,
        staleness_events: 0,
        deadlocks: Vec::new(),
        releases: Vec::new(),
    })
}
