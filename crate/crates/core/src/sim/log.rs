//! Simulation log and its CSV export.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Duration;

use crate::dynamics::{ControlInput, JointState};
use crate::error::{Error, Result};

/// Which controller produced a log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlMode {
    Distributed,
    Centralized,
}

/// One robot in one step.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotRecord {
    pub robot_id: usize,
    /// Measured state at the start of the step.
    pub x_s: JointState,
    /// Input held over the step.
    pub u: ControlInput,
    /// Optimal cost, `NaN` when no problem was solved.
    pub objective: f64,
    /// Wall time of the solve; `None` when the robot held without solving.
    pub solve_time: Option<Duration>,
    pub gamma_d: bool,
    pub gamma_r: bool,
    /// Task index pursued, `-1` while parked at the neutral pose.
    pub target_id: i64,
    /// `‖q̇^Np − q̇^0‖` of the published prediction.
    pub velocity_change: f64,
    /// Residuum against the robot's current task target.
    pub residuum: f64,
    /// The solve failed and the robot braked.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub time: f64,
    pub robots: Vec<RobotRecord>,
    /// Smallest exact ELS margin `H − 1` over all constrained pairs.
    pub min_els_margin: f64,
    /// Smallest segment–segment distance over all robot pairs.
    pub min_link_distance: f64,
}

/// A deadlock resolution group being formed.
#[derive(Debug, Clone, PartialEq)]
pub struct DeadlockEvent {
    pub step: u64,
    pub members: Vec<usize>,
    pub leader: usize,
    /// Residuum of each member at formation.
    pub residuals: Vec<f64>,
}

/// A resolution group being released.
#[derive(Debug, Clone, PartialEq)]
pub struct ReleaseEvent {
    pub step: u64,
    pub members: Vec<usize>,
    /// Targets stored for the deactivated members, restored on release.
    pub restored: Vec<(usize, JointState)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimLog {
    pub scenario: String,
    pub mode: ControlMode,
    pub ts: f64,
    pub horizon: usize,
    pub steps: Vec<StepRecord>,
    /// Plant state after the last step.
    pub final_states: Vec<JointState>,
    /// Completed tasks per robot.
    pub tasks_completed: Vec<usize>,
    pub task_counts: Vec<usize>,
    /// Steps until every robot finished all tasks, `None` if the budget ran out.
    pub execution_steps: Option<u64>,
    pub safety_stop: bool,
    pub staleness_events: usize,
    pub deadlocks: Vec<DeadlockEvent>,
    pub releases: Vec<ReleaseEvent>,
}

impl SimLog {
    pub fn completed(&self) -> Vec<bool> {
        self.tasks_completed.iter().zip(&self.task_counts).map(|(d, n)| d >= n).collect()
    }

    pub fn all_completed(&self) -> bool {
        self.execution_steps.is_some() && !self.safety_stop
    }

    pub fn robot_count(&self) -> usize {
        self.task_counts.len()
    }

    /// Joint-position trajectory of one robot, one entry per step plus the final state.
    pub fn positions(&self, robot: usize) -> Vec<Vec<f64>> {
        self.steps
            .iter()
            .map(|s| s.robots[robot].x_s.q.as_slice().to_vec())
            .chain(std::iter::once(self.final_states[robot].q.as_slice().to_vec()))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let n = self.steps.first().map_or(0, |s| s.robots.first().map_or(0, |r| r.x_s.dof()));
        let mut out = String::from("t,robot_id");
        for prefix in ["q", "qd", "u"] {
            for j in 1..=n {
                let _ = write!(out, ",{prefix}{j}");
            }
        }
        out.push_str(",cost,solve_ms,gamma_D,gamma_R,target_id,min_els_margin,min_link_dist\n");
        for s in &self.steps {
            for r in &s.robots {
                let _ = write!(out, "{},{}", sig9(s.time), r.robot_id);
                for v in r.x_s.q.iter().chain(r.x_s.qd.iter()).chain(r.u.iter()) {
                    let _ = write!(out, ",{}", sig9(*v));
                }
                let ms = r.solve_time.map_or(0.0, |d| d.as_secs_f64() * 1e3);
                let _ = writeln!(
                    out,
                    ",{},{},{},{},{},{},{}",
                    sig9(r.objective),
                    sig9(ms),
                    u8::from(r.gamma_d),
                    u8::from(r.gamma_r),
                    r.target_id,
                    sig9(s.min_els_margin),
                    sig9(s.min_link_distance)
                );
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Decimal rendering with 9 significant digits.
pub fn sig9(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        let s = if s.contains('.') { s.trim_end_matches('0').trim_end_matches('.').to_string() } else { s };
        if s == "-0" {
            "0".into()
        } else {
            s
        }
    } else {
        format!("{v:.8e}")
    }
}
