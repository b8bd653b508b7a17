//! Closed-loop scenario runner.
//!
//! Each step: measure the plant, read the neighbour predictions shifted to
//! the current step, solve every agent, let the coordinator react, apply the
//! inputs as a zero-order hold over `T_s` and exchange the fresh predictions.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use crate::collision::CollisionPairSet;
use crate::comms::{
    decode, encode, in_process_network, udp_network, CoordinatorCommand, DeadlockReport, Endpoint, Message,
    NeighborView, TrajectoryMessage, DEFAULT_MAX_STALE,
};
use crate::coordinator::{residuum, CoordinatorState, RobotReport};
use crate::dynamics::{ControlInput, DiscreteDynamics, JointState};
use crate::error::{Error, Result};
use crate::game::{game_step_with_views, Agent, AgentOutput, AgentTask, CentralizedController, PredictedTrajectory};
use crate::kinematics::ManipulatorModel;
use crate::sim::audit::Geometry;
use crate::sim::log::{ControlMode, DeadlockEvent, ReleaseEvent, RobotRecord, SimLog, StepRecord};
use crate::sim::scenario::{ScenarioConfig, TransportKind};

/// Longest wait for a neighbour frame that has not arrived yet.
const RECEIVE_TIMEOUT: Duration = Duration::from_millis(50);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Moving,
    Dwell(u64),
    Done,
}

/// Task sequencing of one robot.
#[derive(Debug, Clone)]
struct Progress {
    task: usize,
    phase: Phase,
    completed: usize,
}

impl Progress {
    fn new(task_count: usize) -> Self {
        Self { task: 0, phase: if task_count == 0 { Phase::Done } else { Phase::Moving }, completed: 0 }
    }

    /// Advances dwell and task bookkeeping at the start of a step. Returns
    /// whether the pursued target changed.
    fn update(&mut self, scenario: &ScenarioConfig, robot: usize, x: &JointState, may_arrive: bool) -> bool {
        let tasks = &scenario.robots[robot].tasks;
        let before = (self.task, self.phase);
        if self.phase == Phase::Moving
            && may_arrive
            && residuum(x, &tasks[self.task].target) <= scenario.deadlock.eps_res
        {
            self.completed += 1;
            self.phase = Phase::Dwell(tasks[self.task].dwell);
        }
        if self.phase == Phase::Dwell(0) {
            self.task += 1;
            self.phase = if self.task < tasks.len() { Phase::Moving } else { Phase::Done };
        }
        before.0 != self.task || std::mem::discriminant(&before.1) != std::mem::discriminant(&self.phase)
    }

    fn after_step(&mut self) {
        if let Phase::Dwell(left) = self.phase {
            self.phase = Phase::Dwell(left.saturating_sub(1));
        }
    }

    /// Target the coordinator compares against.
    fn reported_target(&self, scenario: &ScenarioConfig, robot: usize) -> JointState {
        let r = &scenario.robots[robot];
        match self.phase {
            Phase::Done => JointState::at_rest(&r.model.neutral_pose),
            _ => r.tasks[self.task].target.clone(),
        }
    }
}

fn make_endpoints(kind: TransportKind, count: usize) -> Result<Vec<Box<dyn Endpoint>>> {
    Ok(match kind {
        TransportKind::Inproc => in_process_network(count).into_iter().map(|e| Box::new(e) as Box<dyn Endpoint>).collect(),
        TransportKind::Udp => {
            udp_network(count, "127.0.0.1")?.into_iter().map(|e| Box::new(e) as Box<dyn Endpoint>).collect()
        }
    })
}

fn broadcast(endpoint: &mut dyn Endpoint, prediction: &PredictedTrajectory) -> Result<()> {
    let msg = TrajectoryMessage::from_prediction(prediction)?;
    endpoint.broadcast(&encode(&Message::Trajectory(msg))?)
}

/// Collects the frames of `step` from every other robot into each view.
fn collect(endpoints: &mut [Box<dyn Endpoint>], views: &mut [NeighborView], step: u64) -> Result<()> {
    let expected = endpoints.len().saturating_sub(1);
    for (ep, view) in endpoints.iter_mut().zip(views.iter_mut()) {
        let mut got = 0;
        loop {
            let timeout = if got < expected { RECEIVE_TIMEOUT } else { Duration::ZERO };
            let Some(frame) = ep.recv_timeout(timeout)? else { break };
            match decode(&frame) {
                Ok(Message::Trajectory(t)) => {
                    if t.step_index == step {
                        got += 1;
                    }
                    view.receive(t.to_prediction());
                }
                Ok(_) => log::warn!("robot {} ignored a non-trajectory frame", ep.id()),
                Err(e) => log::warn!("robot {} dropped a malformed frame: {e}", ep.id()),
            }
        }
    }
    Ok(())
}

/// Report and command pass through the wire codec like any agent/coordinator message.
fn relay_report(robot: usize, step: u64, deadlock: bool, x_s: &JointState, x_f: &JointState) -> Result<RobotReport> {
    let msg = Message::Report(DeadlockReport {
        robot_id: robot as u16,
        step_index: step,
        gamma_d: deadlock,
        n: x_s.dof() as u8,
        x_s: x_s.stacked().as_slice().to_vec(),
        x_f: x_f.stacked().as_slice().to_vec(),
    });
    match decode(&encode(&msg)?)? {
        Message::Report(r) => Ok(RobotReport {
            deadlock: r.gamma_d,
            x_s: JointState::from_stacked(&r.x_s)?,
            x_f: JointState::from_stacked(&r.x_f)?,
        }),
        _ => Err(Error::InvalidScenario("report decoded as another message type".into())),
    }
}

fn relay_command(robot: usize, step: u64, active: bool, target: Option<&JointState>) -> Result<(bool, Option<JointState>)> {
    let msg = Message::Command(CoordinatorCommand {
        robot_id: robot as u16,
        step_index: step,
        gamma_r: active,
        override_target: target.map(|t| t.stacked().as_slice().to_vec()),
    });
    match decode(&encode(&msg)?)? {
        Message::Command(c) => Ok((c.gamma_r, c.override_target.map(|t| JointState::from_stacked(&t)).transpose()?)),
        _ => Err(Error::InvalidScenario("command decoded as another message type".into())),
    }
}

fn clearance(models: &[Arc<ManipulatorModel>], pair_sets: &[CollisionPairSet], x: &[JointState]) -> Result<(f64, f64)> {
    let q: Vec<&[f64]> = x.iter().map(|s| s.q.as_slice()).collect();
    let g = Geometry::new(models, &q)?;
    Ok((g.min_els_margin(pair_sets), g.min_link_distance()))
}

fn velocity_change(p: &PredictedTrajectory) -> f64 {
    match (p.states.first(), p.states.last()) {
        (Some(a), Some(b)) => (&b.qd - &a.qd).norm(),
        _ => 0.0,
    }
}

/// Runs the distributed controller over the scenario's transport.
pub fn run(scenario: &ScenarioConfig) -> Result<SimLog> {
    let endpoints = make_endpoints(scenario.transport, scenario.robots.len())?;
    run_with_endpoints(scenario, endpoints)
}

/// Runs the distributed controller over the given endpoints, one per robot.
pub fn run_with_endpoints(scenario: &ScenarioConfig, mut endpoints: Vec<Box<dyn Endpoint>>) -> Result<SimLog> {
    scenario.validate()?;
    let m = scenario.robots.len();
    if endpoints.len() != m {
        return Err(Error::Dimension(format!("{} endpoints for {m} robots", endpoints.len())));
    }
    let configs = scenario.agent_configs()?;
    let models = scenario.models();
    let pair_sets: Vec<CollisionPairSet> = configs.iter().map(|c| c.pair_set.clone()).collect();
    let dynamics: Vec<DiscreteDynamics> = configs.iter().map(|c| c.dynamics.clone()).collect();
    let mut agents: Vec<Agent> = configs.into_iter().map(|c| Agent::new(c, scenario.deadlock)).collect();
    let mut coordinator = CoordinatorState::new(scenario.deadlock, scenario.neutral_states());
    let mut views = vec![NeighborView::new(DEFAULT_MAX_STALE); m];
    let mut x: Vec<JointState> = scenario.robots.iter().map(|r| r.initial.clone()).collect();
    let mut progress: Vec<Progress> = scenario.robots.iter().map(|r| Progress::new(r.tasks.len())).collect();
    let mut log = empty_log(scenario, ControlMode::Distributed);

    for (i, ep) in endpoints.iter_mut().enumerate() {
        broadcast(ep.as_mut(), &PredictedTrajectory::coasting(i, 0, &x[i], &dynamics[i], scenario.horizon))?;
    }
    collect(&mut endpoints, &mut views, 0)?;

    for step in 0..scenario.step_budget {
        for i in 0..m {
            if progress[i].update(scenario, i, &x[i], coordinator.gamma_r[i]) {
                agents[i].reset_warm_start();
            }
        }
        if progress.iter().all(|p| p.phase == Phase::Done) {
            log.execution_steps = Some(step);
            break;
        }
        let current: Vec<BTreeMap<usize, PredictedTrajectory>> =
            views.iter_mut().map(|v| v.current(step, |r| &dynamics[r])).collect();
        if views.iter().any(NeighborView::safety_stop) {
            log::error!("step {step}: neighbour predictions missing too long; safety stop");
            log.safety_stop = true;
            brake_to_rest(scenario, &dynamics, &agents, &models, &pair_sets, &mut x, &progress, step, &mut log)?;
            break;
        }

        let gamma_r = coordinator.gamma_r.clone();
        let tasks: Vec<AgentTask> = (0..m)
            .map(|i| {
                let r = &scenario.robots[i];
                match progress[i].phase {
                    Phase::Dwell(_) => AgentTask::Hold,
                    Phase::Done if gamma_r[i] => AgentTask::Hold,
                    Phase::Done => AgentTask::Solve(coordinator.neutral[i].clone()),
                    Phase::Moving => AgentTask::Solve(coordinator.target_for(i, &r.tasks[progress[i].task].target)),
                }
            })
            .collect();
        let outputs = game_step_with_views(&mut agents, &x, &tasks, &current, &models, step)?;

        let mut reports = Vec::with_capacity(m);
        for (i, out) in outputs.iter().enumerate() {
            let deadlock = out.deadlock && progress[i].phase == Phase::Moving;
            reports.push(relay_report(i, step, deadlock, &x[i], &progress[i].reported_target(scenario, i))?);
        }
        let segments = (0..m)
            .map(|i| crate::kinematics::line_segments(&models[i], x[i].q.as_slice()))
            .collect::<Result<Vec<_>>>()?;
        let groups_before = coordinator.groups.clone();
        let (commands, events) = coordinator.update(step, &reports, &segments)?;
        for members in &events.formed {
            if let Some(g) = coordinator.groups.iter().find(|g| &g.members == members) {
                log.deadlocks.push(DeadlockEvent {
                    step,
                    members: members.clone(),
                    leader: g.leader,
                    residuals: members.iter().map(|&i| residuum(&reports[i].x_s, &reports[i].x_f)).collect(),
                });
            }
        }
        for members in &events.released {
            let restored = groups_before
                .iter()
                .find(|g| &g.members == members)
                .map(|g| g.stored_targets.iter().map(|(&i, t)| (i, t.clone())).collect())
                .unwrap_or_default();
            log.releases.push(ReleaseEvent { step, members: members.clone(), restored });
        }
        for c in &commands {
            let (active, _) = relay_command(c.robot_id, step, c.active, c.override_target.as_ref())?;
            if active != gamma_r[c.robot_id] {
                agents[c.robot_id].reset_warm_start();
            }
        }

        record_step(scenario, &models, &pair_sets, &x, &outputs, &gamma_r, &progress, step, &mut log)?;
        for i in 0..m {
            x[i] = dynamics[i].step(&x[i], &outputs[i].input);
            progress[i].after_step();
        }
        for (ep, out) in endpoints.iter_mut().zip(&outputs) {
            broadcast(ep.as_mut(), &out.prediction)?;
        }
        collect(&mut endpoints, &mut views, step)?;
    }
    if log.execution_steps.is_none() && !log.safety_stop && progress.iter().all(|p| p.phase == Phase::Done) {
        log.execution_steps = Some(log.steps.len() as u64);
    }
    log.staleness_events = views.iter().map(|v| v.staleness_events).sum();
    log.final_states = x;
    log.tasks_completed = progress.iter().map(|p| p.completed).collect();
    Ok(log)
}

fn empty_log(scenario: &ScenarioConfig, mode: ControlMode) -> SimLog {
    SimLog {
        scenario: scenario.name.clone(),
        mode,
        ts: scenario.ts,
        horizon: scenario.horizon,
        steps: Vec::new(),
        final_states: Vec::new(),
        tasks_completed: vec![0; scenario.robots.len()],
        task_counts: scenario.robots.iter().map(|r| r.tasks.len()).collect(),
        execution_steps: None,
        safety_stop: false,
        staleness_events: 0,
        deadlocks: Vec::new(),
        releases: Vec::new(),
    }
}

fn target_id(p: &Progress, active: bool) -> i64 {
    match p.phase {
        Phase::Moving if !active => -1,
        Phase::Done if !active => -1,
        _ => p.task as i64,
    }
}

#[allow(clippy::too_many_arguments)]
fn record_step(
    scenario: &ScenarioConfig,
    models: &[Arc<ManipulatorModel>],
    pair_sets: &[CollisionPairSet],
    x: &[JointState],
    outputs: &[AgentOutput],
    gamma_r: &[bool],
    progress: &[Progress],
    step: u64,
    log: &mut SimLog,
) -> Result<()> {
    let (min_els_margin, min_link_distance) = clearance(models, pair_sets, x)?;
    let robots = outputs
        .iter()
        .enumerate()
        .map(|(i, out)| RobotRecord {
            robot_id: i,
            x_s: x[i].clone(),
            u: out.input.clone(),
            objective: out.objective,
            solve_time: out.solved.then_some(out.stats.solve_time),
            gamma_d: out.deadlock && progress[i].phase == Phase::Moving,
            gamma_r: gamma_r[i],
            target_id: target_id(&progress[i], gamma_r[i]),
            velocity_change: velocity_change(&out.prediction),
            residuum: residuum(&x[i], &progress[i].reported_target(scenario, i)),
            fallback: out.fallback,
        })
        .collect();
    log.steps.push(StepRecord { step, time: step as f64 * scenario.ts, robots, min_els_margin, min_link_distance });
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn brake_to_rest(
    scenario: &ScenarioConfig,
    dynamics: &[DiscreteDynamics],
    agents: &[Agent],
    models: &[Arc<ManipulatorModel>],
    pair_sets: &[CollisionPairSet],
    x: &mut [JointState],
    progress: &[Progress],
    mut step: u64,
    log: &mut SimLog,
) -> Result<()> {
    while step < scenario.step_budget && x.iter().any(|s| s.qd.amax() > 1e-9) {
        let outputs: Vec<AgentOutput> =
            agents.iter().zip(x.iter()).map(|(a, s)| a.clone().hold(s, step)).collect();
        let gamma_r = vec![true; x.len()];
        record_step(scenario, models, pair_sets, x, &outputs, &gamma_r, progress, step, log)?;
        for i in 0..x.len() {
            x[i] = dynamics[i].step(&x[i], &outputs[i].input);
        }
        step += 1;
    }
    Ok(())
}

/// Runs the centralised baseline: one joint problem per step.
pub fn run_centralized(scenario: &ScenarioConfig) -> Result<SimLog> {
    scenario.validate()?;
    let m = scenario.robots.len();
    let configs = scenario.agent_configs()?;
    let models = scenario.models();
    let pair_sets: Vec<CollisionPairSet> = configs.iter().map(|c| c.pair_set.clone()).collect();
    let dynamics: Vec<DiscreteDynamics> = configs.iter().map(|c| c.dynamics.clone()).collect();
    let mut controller = CentralizedController::new(configs.clone());
    let mut x: Vec<JointState> = scenario.robots.iter().map(|r| r.initial.clone()).collect();
    let mut progress: Vec<Progress> = scenario.robots.iter().map(|r| Progress::new(r.tasks.len())).collect();
    let mut log = empty_log(scenario, ControlMode::Centralized);

    for step in 0..scenario.step_budget {
        let mut changed = false;
        for i in 0..m {
            changed |= progress[i].update(scenario, i, &x[i], true);
        }
        if changed {
            controller.reset_warm_start();
        }
        if progress.iter().all(|p| p.phase == Phase::Done) {
            log.execution_steps = Some(step);
            break;
        }
        let targets: Vec<JointState> = (0..m)
            .map(|i| match progress[i].phase {
                Phase::Moving => scenario.robots[i].tasks[progress[i].task].target.clone(),
                _ => JointState::at_rest(x[i].q.as_slice()),
            })
            .collect();
        let (mut inputs, stats, objective) = controller.step(&x, &targets)?;
        for i in 0..m {
            if progress[i].phase != Phase::Moving {
                inputs[i] = configs[i].bounds.braking_input(&x[i], configs[i].ts);
            }
        }
        controller.u_prev = inputs.clone();
        let (min_els_margin, min_link_distance) = clearance(&models, &pair_sets, &x)?;
        let robots = (0..m)
            .map(|i| RobotRecord {
                robot_id: i,
                x_s: x[i].clone(),
                u: inputs[i].clone(),
                objective,
                solve_time: Some(stats.solve_time),
                gamma_d: false,
                gamma_r: true,
                target_id: progress[i].task as i64,
                velocity_change: f64::NAN,
                residuum: residuum(&x[i], &progress[i].reported_target(scenario, i)),
                fallback: objective.is_nan(),
            })
            .collect();
        log.steps.push(StepRecord { step, time: step as f64 * scenario.ts, robots, min_els_margin, min_link_distance });
        for i in 0..m {
            x[i] = dynamics[i].step(&x[i], &inputs[i]);
            progress[i].after_step();
        }
    }
    if log.execution_steps.is_none() && progress.iter().all(|p| p.phase == Phase::Done) {
        log.execution_steps = Some(log.steps.len() as u64);
    }
    log.final_states = x;
    log.tasks_completed = progress.iter().map(|p| p.completed).collect();
    Ok(log)
}

/// Inputs of every step and robot, in log order.
pub fn logged_inputs(log: &SimLog) -> Vec<Vec<ControlInput>> {
    log.steps.iter().map(|s| s.robots.iter().map(|r| r.u.clone()).collect()).collect()
}
