//! Deadlock detection and resolution.
//!
//! Agents flag a deadlock when their predicted velocities barely change over
//! the horizon while they are still far from their target. The coordinator
//! groups flagged robots with every robot whose links come within `d_min`;
//! inside a group only the robot closest to its target keeps going, the
//! others are sent to their neutral poses until the group is released.

use std::collections::BTreeMap;

use crate::collision::min_link_distance;
use crate::dynamics::JointState;
use crate::error::{Error, Result};
use crate::kinematics::LineSegment;
use crate::ocp::OcpSolution;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeadlockParams {
    /// Velocity-change threshold `ε_v` (rad/s).
    pub eps_v: f64,
    /// Minimum goal error `δ_x` for a deadlock (rad).
    pub delta_x: f64,
    /// Link distance below which robots are grouped (m).
    pub d_min: f64,
    /// Residuum at which a target counts as reached (rad).
    pub eps_res: f64,
    /// Steps after which a resolution group is released even if its leader
    /// has not arrived.
    pub hold_timeout: u64,
}

impl Default for DeadlockParams {
    fn default() -> Self {
        Self { eps_v: 1.5e-3, delta_x: 1.2e-2, d_min: 0.2, eps_res: 4e-2, hold_timeout: 150 }
    }
}

impl DeadlockParams {
    pub fn validate(&self) -> Result<()> {
        for (what, v) in [("eps_v", self.eps_v), ("delta_x", self.delta_x), ("d_min", self.d_min), ("eps_res", self.eps_res)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidScenario(format!("deadlock parameter {what} must be positive, got {v}")));
            }
        }
        if self.hold_timeout == 0 {
            return Err(Error::InvalidScenario("deadlock hold_timeout must be positive".into()));
        }
        Ok(())
    }
}

/// Full-state Euclidean distance to the target.
pub fn residuum(x_s: &JointState, x_f: &JointState) -> f64 {
    x_s.distance(x_f)
}

/// Deadlock test on predicted velocities at the first and last stage.
pub fn detect_deadlock_from(
    qd_first: &nalgebra::DVector<f64>,
    qd_last: &nalgebra::DVector<f64>,
    x_s: &JointState,
    x_f: &JointState,
    params: &DeadlockParams,
) -> bool {
    (qd_last - qd_first).norm() <= params.eps_v && residuum(x_s, x_f) >= params.delta_x
}

pub fn detect_deadlock(sol: &OcpSolution, x_s: &JointState, x_f: &JointState, params: &DeadlockParams) -> bool {
    let states = &sol.states[0];
    detect_deadlock_from(&states[0].qd, &states[states.len() - 1].qd, x_s, x_f, params)
}

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut r = i;
    while parent[r] != r {
        r = parent[r];
    }
    let mut c = i;
    while parent[c] != r {
        let next = parent[c];
        parent[c] = r;
        c = next;
    }
    r
}

/// Partition of the robots: each flagged robot absorbs every robot whose
/// links come within `d_min` of its own, transitively.
pub fn cluster(segments: &[Vec<LineSegment>], deadlock: &[bool], d_min: f64) -> Vec<Vec<usize>> {
    let m = segments.len();
    let mut parent: Vec<usize> = (0..m).collect();
    for i in (0..m).filter(|&i| deadlock.get(i).copied().unwrap_or(false)) {
        for j in 0..m {
            if j != i && min_link_distance(&segments[i], &segments[j]) <= d_min {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..m {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Activation decision for one robot.
#[derive(Debug, Clone, PartialEq)]
pub struct Command {
    pub robot_id: usize,
    /// `γ_R`: whether the robot pursues its own target.
    pub active: bool,
    /// Target replacing the task target while deactivated.
    pub override_target: Option<JointState>,
}

/// Member of `cluster` with the smallest residuum, ties to the lowest id.
pub fn cluster_leader(cluster: &[usize], residuals: &[f64]) -> Result<usize> {
    cluster
        .iter()
        .copied()
        .min_by(|&a, &b| residuals[a].total_cmp(&residuals[b]).then(a.cmp(&b)))
        .ok_or(Error::EmptyCluster)
}

/// Commands for one snapshot of clusters: every multi-robot cluster keeps its
/// leader active and parks the rest at their neutral states.
pub fn resolve(clusters: &[Vec<usize>], residuals: &[f64], neutral: &[JointState]) -> Result<Vec<Command>> {
    let mut commands: Vec<Command> =
        (0..residuals.len()).map(|i| Command { robot_id: i, active: true, override_target: None }).collect();
    for c in clusters {
        let leader = cluster_leader(c, residuals)?;
        if c.len() < 2 {
            continue;
        }
        for &i in c {
            if i != leader {
                commands[i] = Command { robot_id: i, active: false, override_target: Some(neutral[i].clone()) };
            }
        }
    }
    Ok(commands)
}

/// Per-robot input to the coordinator for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotReport {
    pub deadlock: bool,
    pub x_s: JointState,
    /// Current task target.
    pub x_f: JointState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolutionGroup {
    pub members: Vec<usize>,
    pub leader: usize,
    pub since_step: u64,
    /// Task targets stored at deactivation.
    pub stored_targets: BTreeMap<usize, JointState>,
}

/// Events the coordinator emitted during one update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CoordinatorEvents {
    pub formed: Vec<Vec<usize>>,
    pub released: Vec<Vec<usize>>,
}

/// Stateful coordinator, evaluated once per game step.
#[derive(Debug, Clone)]
pub struct CoordinatorState {
    pub params: DeadlockParams,
    /// Neutral state (`x^D`) of each robot.
    pub neutral: Vec<JointState>,
    pub gamma_d: Vec<bool>,
    pub gamma_r: Vec<bool>,
    pub groups: Vec<ResolutionGroup>,
    pub clusters: Vec<Vec<usize>>,
}

impl CoordinatorState {
    pub fn new(params: DeadlockParams, neutral: Vec<JointState>) -> Self {
        let m = neutral.len();
        Self {
            params,
            neutral,
            gamma_d: vec![false; m],
            gamma_r: vec![true; m],
            groups: Vec::new(),
            clusters: (0..m).map(|i| vec![i]).collect(),
        }
    }

    /// Target robot `i` should pursue right now given its task target.
    pub fn target_for(&self, i: usize, task_target: &JointState) -> JointState {
        if self.gamma_r[i] {
            task_target.clone()
        } else {
            self.neutral[i].clone()
        }
    }

    /// Task target stored for a deactivated robot.
    pub fn stored_target(&self, i: usize) -> Option<&JointState> {
        self.groups.iter().find_map(|g| g.stored_targets.get(&i))
    }

    /// Processes one step of reports; returns the commands for the next step.
    pub fn update(
        &mut self,
        step: u64,
        reports: &[RobotReport],
        segments: &[Vec<LineSegment>],
    ) -> Result<(Vec<Command>, CoordinatorEvents)> {
        let m = self.neutral.len();
        if reports.len() != m || segments.len() != m {
            return Err(Error::Dimension(format!("coordinator expects {m} reports")));
        }
        let residuals: Vec<f64> = reports.iter().map(|r| residuum(&r.x_s, &r.x_f)).collect();
        let mut events = CoordinatorEvents::default();
        let params = self.params;
        self.groups.retain(|g| {
            let done = residuals[g.leader] <= params.eps_res || step.saturating_sub(g.since_step) >= params.hold_timeout;
            if done {
                events.released.push(g.members.clone());
            }
            !done
        });

        self.gamma_d = reports.iter().map(|r| r.deadlock).collect();
        self.clusters = cluster(segments, &self.gamma_d, params.d_min);
        for c in self.clusters.iter().filter(|c| c.len() > 1) {
            let overlapping: Vec<usize> =
                (0..self.groups.len()).filter(|&g| self.groups[g].members.iter().any(|i| c.contains(i))).collect();
            if overlapping.is_empty() {
                let leader = cluster_leader(c, &residuals)?;
                let stored = c.iter().filter(|&&i| i != leader).map(|&i| (i, reports[i].x_f.clone())).collect();
                self.groups.push(ResolutionGroup { members: c.clone(), leader, since_step: step, stored_targets: stored });
                events.formed.push(c.clone());
            } else {
                let g = &mut self.groups[overlapping[0]];
                for &i in c {
                    if !g.members.contains(&i) {
                        g.members.push(i);
                        g.stored_targets.insert(i, reports[i].x_f.clone());
                    }
                }
                g.members.sort_unstable();
            }
        }

        let mut commands: Vec<Command> =
            (0..m).map(|i| Command { robot_id: i, active: true, override_target: None }).collect();
        for g in &self.groups {
            for &i in &g.members {
                if i != g.leader {
                    commands[i] = Command { robot_id: i, active: false, override_target: Some(self.neutral[i].clone()) };
                }
            }
        }
        self.gamma_r = commands.iter().map(|c| c.active).collect();
        Ok((commands, events))
    }
}
