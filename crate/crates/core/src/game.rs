//! Non-cooperative game between MPC agents, plus the centralised baseline.
//!
//! Each game step every agent reads the neighbour predictions of the previous
//! step, shifted by one stage (Jacobi update), solves its own problem and
//! publishes a fresh prediction. No agent ever sees another agent's solution
//! of the current step, so the outcome does not depend on evaluation order.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use crate::coordinator::{detect_deadlock, DeadlockParams};
use crate::dynamics::{Bounds, ControlInput, DiscreteDynamics, JointState};
use crate::error::{Error, Result};
use crate::kinematics::ManipulatorModel;
use crate::ocp::{build_centralized_problem, build_problem, solve, AgentConfig, OcpSolution, SolveStats};

/// A robot's predicted state sequence over the horizon, the exchanged unit.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedTrajectory {
    pub robot_id: usize,
    /// Game step at which `states[0]` is the (predicted) measured state.
    pub step_index: u64,
    pub states: Vec<JointState>,
}

impl PredictedTrajectory {
    /// Validates that consecutive states are joined by admissible inputs.
    pub fn new(
        robot_id: usize,
        step_index: u64,
        states: Vec<JointState>,
        dynamics: &DiscreteDynamics,
        bounds: &Bounds,
        tol: f64,
    ) -> Result<Self> {
        if states.len() < 2 {
            return Err(Error::InvalidTrajectory(format!("{} states, need at least 2", states.len())));
        }
        let n = dynamics.dof();
        for (k, w) in states.windows(2).enumerate() {
            if w[0].dof() != n || w[1].dof() != n {
                return Err(Error::InvalidTrajectory(format!("state {k} has the wrong dimension")));
            }
            let u = dynamics.infer_input(&w[0], &w[1]);
            let residual = (dynamics.step(&w[0], &u).stacked() - w[1].stacked()).amax();
            if residual.is_nan() || residual > tol {
                return Err(Error::InvalidTrajectory(format!(
                    "states {k} and {} are not joined by the dynamics (residual {residual:.3e})",
                    k + 1
                )));
            }
            let excess = bounds.input_violation(&u);
            if excess > tol {
                return Err(Error::InvalidTrajectory(format!(
                    "transition {k} needs an input {excess:.3e} beyond the acceleration limits"
                )));
            }
        }
        Ok(Self { robot_id, step_index, states })
    }

    /// `horizon + 1` copies of `x` at rest.
    pub fn stationary(robot_id: usize, step_index: u64, x: &JointState, horizon: usize) -> Self {
        let rest = JointState { q: x.q.clone(), qd: x.qd.map(|_| 0.0) };
        Self { robot_id, step_index, states: vec![rest; horizon + 1] }
    }

    /// Zero-input rollout of `x`: the robot keeps its measured velocity.
    pub fn coasting(robot_id: usize, step_index: u64, x: &JointState, dynamics: &DiscreteDynamics, horizon: usize) -> Self {
        let zero = ControlInput::zeros(x.dof());
        Self { robot_id, step_index, states: dynamics.rollout(x, &vec![zero; horizon]) }
    }

    /// Rollout of maximal braking from `x`.
    pub fn braking(
        robot_id: usize,
        step_index: u64,
        x: &JointState,
        dynamics: &DiscreteDynamics,
        bounds: &Bounds,
        horizon: usize,
    ) -> Self {
        let mut states = Vec::with_capacity(horizon + 1);
        states.push(x.clone());
        for _ in 0..horizon {
            let last = states.last().expect("non-empty");
            let u = bounds.braking_input(last, dynamics.ts);
            states.push(dynamics.step(last, &u));
        }
        Self { robot_id, step_index, states }
    }

    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }

    /// Input that produced the final transition.
    pub fn last_input(&self, dynamics: &DiscreteDynamics) -> ControlInput {
        let n = self.states.len();
        dynamics.infer_input(&self.states[n - 2], &self.states[n - 1])
    }
}

/// Drops the first state and appends one step of `last_input` from the last state.
pub fn shift_extrapolate(
    prev: &PredictedTrajectory,
    dynamics: &DiscreteDynamics,
    last_input: &ControlInput,
) -> PredictedTrajectory {
    let mut states: Vec<JointState> = prev.states[1..].to_vec();
    let next = dynamics.step(prev.states.last().expect("non-empty"), last_input);
    states.push(next);
    PredictedTrajectory { robot_id: prev.robot_id, step_index: prev.step_index + 1, states }
}

/// Shift with the last input recovered from the trajectory itself.
pub fn shift_prediction(prev: &PredictedTrajectory, dynamics: &DiscreteDynamics) -> PredictedTrajectory {
    shift_extrapolate(prev, dynamics, &prev.last_input(dynamics))
}

/// One DMPC agent and the state it carries between steps.
#[derive(Debug, Clone)]
pub struct Agent {
    pub config: AgentConfig,
    pub deadlock: DeadlockParams,
    /// Input applied during the previous interval.
    pub u_prev: ControlInput,
    last_solution: Option<OcpSolution>,
}

impl Agent {
    pub fn new(config: AgentConfig, deadlock: DeadlockParams) -> Self {
        let n = config.dof();
        Self { config, deadlock, u_prev: ControlInput::zeros(n), last_solution: None }
    }

    pub fn robot_id(&self) -> usize {
        self.config.robot_id
    }

    /// Forgets the warm start, e.g. after a dwell or a target switch.
    pub fn reset_warm_start(&mut self) {
        self.last_solution = None;
    }

    /// Brakes without solving (dwell, safety stop) and publishes the braking rollout.
    pub fn hold(&mut self, x_s: &JointState, step: u64) -> AgentOutput {
        let c = &self.config;
        let u = c.bounds.braking_input(x_s, c.ts);
        let prediction = PredictedTrajectory::braking(c.robot_id, step, x_s, &c.dynamics, &c.bounds, c.horizon);
        self.u_prev = u.clone();
        self.last_solution = None;
        AgentOutput {
            robot_id: c.robot_id,
            input: u,
            prediction,
            deadlock: false,
            objective: f64::NAN,
            stats: SolveStats::default(),
            solved: false,
            fallback: false,
        }
    }
}

/// Result of one agent's round.
#[derive(Debug, Clone)]
pub struct AgentOutput {
    pub robot_id: usize,
    /// `u*^0`, held constant over the next sampling interval.
    pub input: ControlInput,
    pub prediction: PredictedTrajectory,
    /// `γ_D` of this round.
    pub deadlock: bool,
    pub objective: f64,
    pub stats: SolveStats,
    /// Whether a problem was solved this round.
    pub solved: bool,
    /// The solve failed and the agent braked instead.
    pub fallback: bool,
}

/// Solves one agent's problem against the neighbours' current-step predictions.
pub fn agent_round(
    agent: &mut Agent,
    x_s: &JointState,
    x_f: &JointState,
    neighbor_preds: &BTreeMap<usize, PredictedTrajectory>,
    neighbor_models: &[Arc<ManipulatorModel>],
    step: u64,
) -> Result<AgentOutput> {
    for robot in agent.config.pair_set.neighbors() {
        if let Some(p) = neighbor_preds.get(&robot) {
            if p.step_index != step {
                return Err(Error::StaleNeighbor { robot });
            }
        }
    }
    let problem = build_problem(&agent.config, x_s, x_f, &agent.u_prev, neighbor_preds, neighbor_models)?;
    let warm = agent.last_solution.as_ref().map(|s| s.shifted(&problem));
    let c = &agent.config;
    let outcome = solve(&problem, warm.as_ref());
    let usable = match &outcome {
        Ok(sol) => sol.stats.converged || sol.stats.max_violation <= c.acceptable_violation,
        Err(_) => false,
    };
    if !usable {
        if let Err(e) = &outcome {
            log::warn!("robot {} step {step}: solver failed ({e}); braking", c.robot_id);
        } else {
            log::warn!("robot {} step {step}: no admissible solution; braking", c.robot_id);
        }
        let stats = outcome.as_ref().map(|s| s.stats.clone()).unwrap_or_default();
        let mut out = agent.hold(x_s, step);
        out.stats = stats;
        out.fallback = true;
        out.solved = true;
        return Ok(out);
    }
    let sol = outcome.expect("usable solution");
    let states = sol.states[0].clone();
    let input = sol.inputs[0][0].clone();
    let deadlock = detect_deadlock(&sol, x_s, x_f, &agent.deadlock);
    let out = AgentOutput {
        robot_id: c.robot_id,
        input: input.clone(),
        prediction: PredictedTrajectory { robot_id: c.robot_id, step_index: step, states },
        deadlock,
        objective: sol.objective,
        stats: sol.stats.clone(),
        solved: true,
        fallback: false,
    };
    agent.u_prev = input;
    agent.last_solution = Some(sol);
    Ok(out)
}

/// What one agent is asked to do in a game step.
#[derive(Debug, Clone)]
pub enum AgentTask {
    /// Solve towards this target.
    Solve(JointState),
    /// Brake and hold without solving.
    Hold,
}

/// Runs every agent once on the same snapshot of neighbour predictions.
///
/// `predictions` must already be shifted to `step`. Agents are solved in
/// parallel when more than one CPU is available; results are identical
/// either way.
pub fn game_step(
    agents: &mut [Agent],
    measurements: &[JointState],
    tasks: &[AgentTask],
    predictions: &BTreeMap<usize, PredictedTrajectory>,
    models: &[Arc<ManipulatorModel>],
    step: u64,
) -> Result<Vec<AgentOutput>> {
    let views = vec![predictions.clone(); agents.len()];
    game_step_with_views(agents, measurements, tasks, &views, models, step)
}

/// Like [`game_step`], with each agent reading its own view of the neighbours.
pub fn game_step_with_views(
    agents: &mut [Agent],
    measurements: &[JointState],
    tasks: &[AgentTask],
    views: &[BTreeMap<usize, PredictedTrajectory>],
    models: &[Arc<ManipulatorModel>],
    step: u64,
) -> Result<Vec<AgentOutput>> {
    if measurements.len() != agents.len() || tasks.len() != agents.len() || views.len() != agents.len() {
        return Err(Error::Dimension("one measurement, task and view per agent required".into()));
    }
    let run = |agent: &mut Agent, x: &JointState, task: &AgentTask, view: &BTreeMap<usize, PredictedTrajectory>| match task {
        AgentTask::Solve(x_f) => agent_round(agent, x, x_f, view, models, step),
        AgentTask::Hold => Ok(agent.hold(x, step)),
    };
    let parallel = std::thread::available_parallelism().map(|n| n.get() > 1).unwrap_or(false);
    if parallel && agents.len() > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = agents
                .iter_mut()
                .zip(measurements)
                .zip(tasks)
                .zip(views)
                .map(|(((a, x), t), v)| scope.spawn(move || run(a, x, t, v)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("agent thread panicked")).collect()
        })
    } else {
        agents.iter_mut().zip(measurements).zip(tasks).zip(views).map(|(((a, x), t), v)| run(a, x, t, v)).collect()
    }
}

/// Centralised baseline: one problem over all robots.
#[derive(Debug, Clone)]
pub struct CentralizedController {
    pub agents: Vec<AgentConfig>,
    pub u_prev: Vec<ControlInput>,
    last_solution: Option<OcpSolution>,
}

impl CentralizedController {
    pub fn new(agents: Vec<AgentConfig>) -> Self {
        let u_prev = agents.iter().map(|a| ControlInput::zeros(a.dof())).collect();
        Self { agents, u_prev, last_solution: None }
    }

    pub fn reset_warm_start(&mut self) {
        self.last_solution = None;
    }

    /// Solves the joint problem; on failure every robot brakes.
    pub fn step(&mut self, measurements: &[JointState], targets: &[JointState]) -> Result<(Vec<ControlInput>, SolveStats, f64)> {
        let outcome = solve_centralized(&self.agents, measurements, targets, &self.u_prev, self.last_solution.as_ref());
        let tol = self.agents.iter().map(|a| a.acceptable_violation).fold(f64::INFINITY, f64::min);
        match outcome {
            Ok(sol) if sol.stats.converged || sol.stats.max_violation <= tol => {
                let inputs: Vec<ControlInput> = sol.inputs.iter().map(|us| us[0].clone()).collect();
                self.u_prev = inputs.clone();
                let (stats, objective) = (sol.stats.clone(), sol.objective);
                self.last_solution = Some(sol);
                Ok((inputs, stats, objective))
            }
            other => {
                let stats = other.map(|s| s.stats).unwrap_or_default();
                let inputs: Vec<ControlInput> = self
                    .agents
                    .iter()
                    .zip(measurements)
                    .map(|(a, x)| a.bounds.braking_input(x, a.ts))
                    .collect();
                self.u_prev = inputs.clone();
                self.last_solution = None;
                Ok((inputs, stats, f64::NAN))
            }
        }
    }
}

/// One joint solve over all robots, warm-started from `warm` shifted by one stage.
pub fn solve_centralized(
    agents: &[AgentConfig],
    measurements: &[JointState],
    targets: &[JointState],
    u_prev: &[ControlInput],
    warm: Option<&OcpSolution>,
) -> Result<OcpSolution> {
    let problem = build_centralized_problem(agents, measurements, targets, u_prev)?;
    let warm = warm.map(|s| s.shifted(&problem));
    solve(&problem, warm.as_ref())
}

/// Mean of per-step solve durations.
pub fn mean_duration(durations: &[Duration]) -> Option<Duration> {
    if durations.is_empty() {
        None
    } else {
        Some(durations.iter().sum::<Duration>() / durations.len() as u32)
    }
}
