//! Finite-horizon optimal control problem of one agent (or of all robots at
//! once for the centralised baseline) and its solver.
//!
//! The transcription keeps every state `x^0..x^Np` and input `u^0..u^{Np−1}`
//! of every decision block as variables, with the dynamics and the initial
//! condition as equality constraints. Inequalities are written `c(z) ≥ 0`:
//! ELS collision margins against frozen neighbour predictions (or against
//! other decision blocks), table clearance, and the joint boxes.
//!
//! `x^0` is pinned to the measured state, so path constraints are imposed on
//! `k = 1..=Np`.

mod solver;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use nalgebra::{DVector, Matrix3, Vector3};

pub use solver::solve;

use crate::collision::{
    chain_ellipsoid_gradient, chain_segment_gradient, els_margin_gradient, CollisionPairSet, SmoothProjection,
    StaticEnvironment,
};
use crate::dynamics::{discretize, Bounds, ControlInput, DiscreteDynamics, JointState};
use crate::error::{Error, Result};
use crate::game::PredictedTrajectory;
use crate::kinematics::{ChainPose, FramePoint, LineSegment, ManipulatorModel};

/// Diagonal cost weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    /// Diagonal of `Qx`, length `2N`.
    pub qx: DVector<f64>,
    /// Diagonal of `Qf`, length `2N`.
    pub qf: DVector<f64>,
    /// Diagonal of `Ru`, length `N`.
    pub ru: DVector<f64>,
    /// Diagonal of `Rd`, length `N`.
    pub rd: DVector<f64>,
}

impl CostWeights {
    pub fn new(qx: DVector<f64>, qf: DVector<f64>, ru: DVector<f64>, rd: DVector<f64>) -> Result<Self> {
        let w = Self { qx, qf, ru, rd };
        w.validate(w.ru.len())?;
        Ok(w)
    }

    /// `Qx` given, `Qf = terminal_factor · Qx`, `Ru = ru · I`, `Rd = rd · I`.
    pub fn with_terminal_factor(qx: &[f64], terminal_factor: f64, ru: f64, rd: f64) -> Result<Self> {
        let n = qx.len() / 2;
        let qx = DVector::from_column_slice(qx);
        Self::new(qx.clone(), qx * terminal_factor, DVector::from_element(n, ru), DVector::from_element(n, rd))
    }

    /// Identity weights with a tenfold terminal weight.
    pub fn identity(n: usize) -> Self {
        Self::with_terminal_factor(&vec![1.0; 2 * n], 10.0, 1.0, 1.0).expect("valid weights")
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        for (what, v, len) in [
            ("Qx", &self.qx, 2 * n),
            ("Qf", &self.qf, 2 * n),
            ("Ru", &self.ru, n),
            ("Rd", &self.rd, n),
        ] {
            if v.len() != len {
                return Err(Error::Dimension(format!("{what} has {} entries, expected {len}", v.len())));
            }
            if !v.iter().all(|w| w.is_finite() && *w >= 0.0) {
                return Err(Error::InvalidScenario(format!("{what} entries must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

fn weighted_sq(w: &DVector<f64>, a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).zip(w.iter()).map(|((x, y), w)| w * (x - y) * (x - y)).sum()
}

fn state_error(x: &JointState, x_f: &JointState, w: &DVector<f64>) -> f64 {
    let n = x.dof();
    let mut acc = 0.0;
    for j in 0..n {
        let dq = x.q[j] - x_f.q[j];
        let dv = x.qd[j] - x_f.qd[j];
        acc += w[j] * dq * dq + w[n + j] * dv * dv;
    }
    acc
}

/// `(x − x_f)ᵀ Qx (x − x_f) + uᵀ Ru u + Δuᵀ Rd Δu` with `Δu = (u_next − u) / ts`.
pub fn stage_cost(
    x: &JointState,
    u: &ControlInput,
    u_next: &ControlInput,
    x_f: &JointState,
    weights: &CostWeights,
    ts: f64,
) -> f64 {
    let du: Vec<f64> = if ts > 0.0 { (u_next - u).iter().map(|d| d / ts).collect() } else { vec![0.0; u.len()] };
    let zero = vec![0.0; u.len()];
    state_error(x, x_f, &weights.qx) + weighted_sq(&weights.ru, u.as_slice(), &zero) + weighted_sq(&weights.rd, &du, &zero)
}

/// `(x − x_f)ᵀ Qf (x − x_f)`.
pub fn terminal_cost(x: &JointState, x_f: &JointState, weights: &CostWeights) -> f64 {
    state_error(x, x_f, &weights.qf)
}

/// Solver tolerances and limits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub stationarity_tol: f64,
    pub feasibility_tol: f64,
    pub max_inner_iters: usize,
    pub max_outer_iters: usize,
    pub initial_penalty: f64,
    pub max_penalty: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            stationarity_tol: 1e-6,
            feasibility_tol: 1e-6,
            max_inner_iters: 200,
            max_outer_iters: 30,
            initial_penalty: 10.0,
            max_penalty: 1e9,
        }
    }
}

/// Everything one agent needs to set up its problem.
#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub robot_id: usize,
    pub model: Arc<ManipulatorModel>,
    pub weights: CostWeights,
    pub horizon: usize,
    pub ts: f64,
    pub dynamics: DiscreteDynamics,
    pub bounds: Bounds,
    pub pair_set: CollisionPairSet,
    pub env: StaticEnvironment,
    pub proj: SmoothProjection,
    /// Collision constraints require `H − 1 ≥ collision_margin`.
    pub collision_margin: f64,
    pub solver: SolverSettings,
    /// Largest constraint violation of an unconverged solution that is still applied.
    pub acceptable_violation: f64,
}

impl AgentConfig {
    pub fn new(robot_id: usize, model: Arc<ManipulatorModel>, weights: CostWeights, horizon: usize, ts: f64) -> Result<Self> {
        let n = model.dof();
        weights.validate(n)?;
        if horizon < 2 {
            return Err(Error::InvalidScenario(format!("horizon must be at least 2, got {horizon}")));
        }
        if !(ts.is_finite() && ts > 0.0) {
            return Err(Error::InvalidScenario(format!("sampling time must be positive, got {ts}")));
        }
        Ok(Self {
            robot_id,
            bounds: crate::dynamics::bounds(&model),
            dynamics: discretize(n, ts),
            model,
            weights,
            horizon,
            ts,
            pair_set: CollisionPairSet::default(),
            env: StaticEnvironment::default(),
            proj: SmoothProjection::default(),
            collision_margin: 0.0,
            solver: SolverSettings::default(),
            acceptable_violation: 1e-4,
        })
    }

    pub fn dof(&self) -> usize {
        self.model.dof()
    }
}

/// One set of decision variables: a robot's states and inputs over the horizon.
#[derive(Debug, Clone)]
pub struct OcpBlock {
    pub robot: usize,
    pub model: Arc<ManipulatorModel>,
    pub x_s: JointState,
    pub x_f: JointState,
    /// Input applied during the previous sampling interval.
    pub u_prev: ControlInput,
    pub weights: CostWeights,
    pub bounds: Bounds,
    /// Table clearance points and how far below each the geometry reaches.
    static_points: Vec<(FramePoint, f64)>,
}

impl OcpBlock {
    pub fn new(agent: &AgentConfig, x_s: JointState, x_f: JointState, u_prev: ControlInput) -> Result<Self> {
        let n = agent.dof();
        for (what, len) in [("x_s", x_s.dof()), ("x_f", x_f.dof()), ("u_prev", u_prev.len())] {
            if len != n {
                return Err(Error::Dimension(format!("{what} has {len} joints, robot has {n}")));
            }
        }
        if !x_s.is_finite() || !x_f.is_finite() {
            return Err(Error::NumericalFailure { stage: "problem setup", iterate: x_s.stacked().as_slice().to_vec() });
        }
        let model = agent.model.clone();
        let mut static_points: Vec<(FramePoint, f64)> = model
            .segments
            .iter()
            .filter(|s| s.start.frame > 0)
            .map(|s| (s.start, 0.0))
            .collect();
        static_points.push((FramePoint::origin(n), model.gripper_offset));
        Ok(Self {
            robot: agent.robot_id,
            model,
            x_s,
            x_f,
            u_prev,
            weights: agent.weights.clone(),
            bounds: agent.bounds.clone(),
            static_points,
        })
    }

    pub fn dof(&self) -> usize {
        self.model.dof()
    }
}

/// Ellipsoids of a robot that is not optimised, frozen along its prediction.
#[derive(Debug, Clone)]
pub struct FrozenNeighbor {
    pub robot: usize,
    /// `[k][ellipsoid] = (center, shape matrix)` for `k = 0..=Np`.
    ellipsoids: Vec<Vec<(Vector3<f64>, Matrix3<f64>)>>,
}

impl FrozenNeighbor {
    pub fn new(model: &ManipulatorModel, prediction: &PredictedTrajectory) -> Result<Self> {
        let ellipsoids = prediction
            .states
            .iter()
            .map(|x| {
                let pose = ChainPose::new(model, x.q.as_slice())?;
                Ok(model
                    .ellipsoids
                    .iter()
                    .map(|spec| {
                        let e = pose.ellipsoid(spec);
                        (e.center, e.shape_matrix())
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(Self { robot: prediction.robot_id, ellipsoids })
    }
}

/// Segment `segment` of decision block `block` against an ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollisionTerm {
    Frozen { block: usize, segment: usize, neighbor: usize, ellipsoid: usize },
    Coupled { block: usize, segment: usize, other_block: usize, ellipsoid: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum RowKind {
    Collision(usize),
    Static { block: usize, point: usize },
    QMin { block: usize, joint: usize },
    QMax { block: usize, joint: usize },
    QdMin { block: usize, joint: usize },
    QdMax { block: usize, joint: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Row {
    pub k: usize,
    pub kind: RowKind,
}

/// A fully specified nonlinear program.
#[derive(Debug, Clone)]
pub struct OcpProblem {
    pub blocks: Vec<OcpBlock>,
    pub neighbors: Vec<FrozenNeighbor>,
    pub terms: Vec<CollisionTerm>,
    pub horizon: usize,
    pub ts: f64,
    pub env: StaticEnvironment,
    pub proj: SmoothProjection,
    pub collision_margin: f64,
    pub settings: SolverSettings,
    pub(crate) rows: Vec<Row>,
    /// Rows are grouped: collision, static, then joint boxes.
    pub(crate) group_sizes: [usize; 3],
}

/// Gradient of one constraint row with respect to `q^k` (and `q̇^k`) of the blocks it involves.
#[derive(Debug, Clone, Default)]
pub(crate) struct RowGradient {
    pub parts: Vec<(usize, Vec<f64>, Option<Vec<f64>>)>,
}

/// Per-block, per-step cached geometry.
pub(crate) struct Geometry {
    /// `[block][k]` for `k = 0..=Np`; `None` at `k = 0`.
    steps: Vec<Vec<Option<StepGeometry>>>,
}

struct StepGeometry {
    pose: ChainPose,
    segments: Vec<LineSegment>,
    ellipsoids: Vec<(Vector3<f64>, Matrix3<f64>)>,
}

impl OcpProblem {
    fn assemble(
        blocks: Vec<OcpBlock>,
        neighbors: Vec<FrozenNeighbor>,
        terms: Vec<CollisionTerm>,
        agent: &AgentConfig,
    ) -> Self {
        let np = agent.horizon;
        let mut rows = Vec::new();
        for k in 1..=np {
            rows.extend((0..terms.len()).map(|t| Row { k, kind: RowKind::Collision(t) }));
        }
        let n_collision = rows.len();
        for k in 1..=np {
            for (b, block) in blocks.iter().enumerate() {
                rows.extend((0..block.static_points.len()).map(|point| Row { k, kind: RowKind::Static { block: b, point } }));
            }
        }
        let n_static = rows.len() - n_collision;
        for k in 1..=np {
            for (b, block) in blocks.iter().enumerate() {
                for joint in 0..block.dof() {
                    rows.push(Row { k, kind: RowKind::QMin { block: b, joint } });
                    rows.push(Row { k, kind: RowKind::QMax { block: b, joint } });
                    rows.push(Row { k, kind: RowKind::QdMin { block: b, joint } });
                    rows.push(Row { k, kind: RowKind::QdMax { block: b, joint } });
                }
            }
        }
        let n_box = rows.len() - n_collision - n_static;
        Self {
            blocks,
            neighbors,
            terms,
            horizon: np,
            ts: agent.ts,
            env: agent.env,
            proj: agent.proj,
            collision_margin: agent.collision_margin,
            settings: agent.solver,
            rows,
            group_sizes: [n_collision, n_static, n_box],
        }
    }

    /// Number of ELS constraint rows.
    pub fn dynamic_collision_count(&self) -> usize {
        self.group_sizes[0]
    }

    /// Number of table-clearance rows.
    pub fn static_count(&self) -> usize {
        self.group_sizes[1]
    }

    pub fn block_size(&self, block: usize) -> usize {
        let n = self.blocks[block].dof();
        (self.horizon + 1) * 2 * n + self.horizon * n
    }

    fn block_offset(&self, block: usize) -> usize {
        (0..block).map(|b| self.block_size(b)).sum()
    }

    pub fn num_variables(&self) -> usize {
        (0..self.blocks.len()).map(|b| self.block_size(b)).sum()
    }

    /// Number of inputs across blocks (the condensed variable count).
    pub fn num_inputs(&self) -> usize {
        self.blocks.iter().map(|b| b.dof() * self.horizon).sum()
    }

    /// Stacks per-block states and inputs into the variable vector.
    pub fn pack(&self, states: &[Vec<JointState>], inputs: &[Vec<ControlInput>]) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.num_variables());
        for b in 0..self.blocks.len() {
            for x in &states[b] {
                z.extend(x.q.iter().chain(x.qd.iter()));
            }
            for u in &inputs[b] {
                z.extend(u.iter());
            }
        }
        z
    }

    /// Inverse of [`pack`](Self::pack).
    pub fn unpack(&self, z: &[f64]) -> Result<BlockTrajectories> {
        if z.len() != self.num_variables() {
            return Err(Error::Dimension(format!("point has {} entries, problem has {}", z.len(), self.num_variables())));
        }
        let mut states = Vec::with_capacity(self.blocks.len());
        let mut inputs = Vec::with_capacity(self.blocks.len());
        for (b, block) in self.blocks.iter().enumerate() {
            let n = block.dof();
            let off = self.block_offset(b);
            states.push(
                (0..=self.horizon)
                    .map(|k| JointState::from_stacked(&z[off + 2 * n * k..off + 2 * n * (k + 1)]).expect("even length"))
                    .collect(),
            );
            let uoff = off + (self.horizon + 1) * 2 * n;
            inputs.push((0..self.horizon).map(|k| DVector::from_column_slice(&z[uoff + n * k..uoff + n * (k + 1)])).collect());
        }
        Ok((states, inputs))
    }

    fn block_objective(&self, b: usize, states: &[JointState], inputs: &[ControlInput]) -> f64 {
        let block = &self.blocks[b];
        let np = self.horizon;
        let mut j = 0.0;
        for k in 0..np {
            let next = if k + 1 < np { &inputs[k + 1] } else { &inputs[k] };
            j += stage_cost(&states[k], &inputs[k], next, &block.x_f, &block.weights, self.ts);
        }
        let du: Vec<f64> = (&inputs[0] - &block.u_prev).iter().map(|d| d / self.ts).collect();
        j += weighted_sq(&block.weights.rd, &du, &vec![0.0; du.len()]);
        j + terminal_cost(&states[np], &block.x_f, &block.weights)
    }

    /// Sum of all blocks' costs.
    pub fn objective_value(&self, states: &[Vec<JointState>], inputs: &[Vec<ControlInput>]) -> f64 {
        (0..self.blocks.len()).map(|b| self.block_objective(b, &states[b], &inputs[b])).sum()
    }

    pub fn objective(&self, z: &[f64]) -> Result<f64> {
        let (states, inputs) = self.unpack(z)?;
        Ok(self.objective_value(&states, &inputs))
    }

    /// Gradient of the objective with respect to the full variable vector.
    pub fn objective_gradient(&self, z: &[f64]) -> Result<Vec<f64>> {
        let (states, inputs) = self.unpack(z)?;
        let mut g = vec![0.0; z.len()];
        for (b, block) in self.blocks.iter().enumerate() {
            let n = block.dof();
            let off = self.block_offset(b);
            let uoff = off + (self.horizon + 1) * 2 * n;
            for k in 0..=self.horizon {
                let w = if k == self.horizon { &block.weights.qf } else { &block.weights.qx };
                let x = &states[b][k];
                for jn in 0..n {
                    g[off + 2 * n * k + jn] = 2.0 * w[jn] * (x.q[jn] - block.x_f.q[jn]);
                    g[off + 2 * n * k + n + jn] = 2.0 * w[n + jn] * (x.qd[jn] - block.x_f.qd[jn]);
                }
            }
            let gu = input_cost_gradient(block, &inputs[b], self.ts);
            for (k, gk) in gu.iter().enumerate() {
                for jn in 0..n {
                    g[uoff + n * k + jn] = gk[jn];
                }
            }
        }
        Ok(g)
    }

    /// Dynamics and initial-condition residuals; zero when feasible.
    pub fn equality_constraints(&self, z: &[f64]) -> Result<Vec<f64>> {
        let (states, inputs) = self.unpack(z)?;
        let mut out = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            let dynamics = discretize(block.dof(), self.ts);
            out.extend((states[b][0].stacked() - block.x_s.stacked()).iter());
            for k in 0..self.horizon {
                let pred = dynamics.step(&states[b][k], &inputs[b][k]);
                out.extend((states[b][k + 1].stacked() - pred.stacked()).iter());
            }
        }
        Ok(out)
    }

    /// Sparse Jacobian `(row, column, value)` of [`equality_constraints`](Self::equality_constraints).
    pub fn equality_jacobian(&self, z: &[f64]) -> Result<Vec<(usize, usize, f64)>> {
        self.unpack(z)?;
        let mut trip = Vec::new();
        let mut row = 0;
        for (b, block) in self.blocks.iter().enumerate() {
            let n = block.dof();
            let off = self.block_offset(b);
            let uoff = off + (self.horizon + 1) * 2 * n;
            for i in 0..2 * n {
                trip.push((row + i, off + i, 1.0));
            }
            row += 2 * n;
            let ts = self.ts;
            for k in 0..self.horizon {
                let xk = off + 2 * n * k;
                let xk1 = off + 2 * n * (k + 1);
                let uk = uoff + n * k;
                for jn in 0..n {
                    let rq = row + jn;
                    let rv = row + n + jn;
                    trip.push((rq, xk1 + jn, 1.0));
                    trip.push((rq, xk + jn, -1.0));
                    trip.push((rq, xk + n + jn, -ts));
                    trip.push((rq, uk + jn, -0.5 * ts * ts));
                    trip.push((rv, xk1 + n + jn, 1.0));
                    trip.push((rv, xk + n + jn, -1.0));
                    trip.push((rv, uk + jn, -ts));
                }
                row += 2 * n;
            }
        }
        Ok(trip)
    }

    /// Collision then table-clearance rows, `c(z) ≥ 0`.
    pub fn inequality_constraints(&self, z: &[f64]) -> Result<Vec<f64>> {
        let (states, _) = self.unpack(z)?;
        let geo = self.geometry(&states)?;
        let n = self.group_sizes[0] + self.group_sizes[1];
        Ok(self.rows[..n].iter().map(|r| self.row_value(r, &states, &geo)).collect())
    }

    /// Sparse Jacobian of [`inequality_constraints`](Self::inequality_constraints).
    pub fn inequality_jacobian(&self, z: &[f64]) -> Result<Vec<(usize, usize, f64)>> {
        let (states, _) = self.unpack(z)?;
        let geo = self.geometry(&states)?;
        let n = self.group_sizes[0] + self.group_sizes[1];
        let mut trip = Vec::new();
        for (i, r) in self.rows[..n].iter().enumerate() {
            let grad = self.row_gradient(r, &geo);
            for (b, dq, dqd) in grad.parts {
                let nb = self.blocks[b].dof();
                let xk = self.block_offset(b) + 2 * nb * r.k;
                for (jn, v) in dq.iter().enumerate() {
                    if *v != 0.0 {
                        trip.push((i, xk + jn, *v));
                    }
                }
                if let Some(dqd) = dqd {
                    for (jn, v) in dqd.iter().enumerate() {
                        if *v != 0.0 {
                            trip.push((i, xk + nb + jn, *v));
                        }
                    }
                }
            }
        }
        Ok(trip)
    }

    /// Box bounds on every variable; `x^0` is left free (it is fixed by an equality).
    pub fn variable_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = Vec::with_capacity(self.num_variables());
        let mut hi = Vec::with_capacity(self.num_variables());
        for block in &self.blocks {
            let n = block.dof();
            let bd = &block.bounds;
            lo.extend(std::iter::repeat_n(f64::NEG_INFINITY, 2 * n));
            hi.extend(std::iter::repeat_n(f64::INFINITY, 2 * n));
            for _ in 1..=self.horizon {
                lo.extend(bd.q_min.iter().copied().chain(bd.qd_max.iter().map(|v| -v)));
                hi.extend(bd.q_max.iter().copied().chain(bd.qd_max.iter().copied()));
            }
            for _ in 0..self.horizon {
                lo.extend(bd.u_max.iter().map(|v| -v));
                hi.extend(bd.u_max.iter().copied());
            }
        }
        (lo, hi)
    }

    pub(crate) fn geometry(&self, states: &[Vec<JointState>]) -> Result<Geometry> {
        let mut steps = Vec::with_capacity(self.blocks.len());
        for (b, block) in self.blocks.iter().enumerate() {
            let model = &block.model;
            let mut per_k = Vec::with_capacity(self.horizon + 1);
            per_k.push(None);
            for x in &states[b][1..] {
                if !x.is_finite() {
                    return Err(Error::NumericalFailure { stage: "state rollout", iterate: x.stacked().as_slice().to_vec() });
                }
                let pose = ChainPose::new(model, x.q.as_slice())?;
                let segments = model.segments.iter().map(|s| pose.segment(s)).collect();
                let ellipsoids = model
                    .ellipsoids
                    .iter()
                    .map(|s| {
                        let e = pose.ellipsoid(s);
                        (e.center, e.shape_matrix())
                    })
                    .collect();
                per_k.push(Some(StepGeometry { pose, segments, ellipsoids }));
            }
            steps.push(per_k);
        }
        Ok(Geometry { steps })
    }

    fn step_geo(geo: &Geometry, b: usize, k: usize) -> &StepGeometry {
        geo.steps[b][k].as_ref().expect("geometry is built for k >= 1")
    }

    fn ellipsoid_at(&self, term: &CollisionTerm, k: usize, geo: &Geometry) -> (Vector3<f64>, Matrix3<f64>) {
        match *term {
            CollisionTerm::Frozen { neighbor, ellipsoid, .. } => self.neighbors[neighbor].ellipsoids[k][ellipsoid],
            CollisionTerm::Coupled { other_block, ellipsoid, .. } => Self::step_geo(geo, other_block, k).ellipsoids[ellipsoid],
        }
    }

    pub(crate) fn row_value(&self, row: &Row, states: &[Vec<JointState>], geo: &Geometry) -> f64 {
        let k = row.k;
        match row.kind {
            RowKind::Collision(t) => {
                let term = &self.terms[t];
                let (block, segment) = match *term {
                    CollisionTerm::Frozen { block, segment, .. } | CollisionTerm::Coupled { block, segment, .. } => {
                        (block, segment)
                    }
                };
                let seg = &Self::step_geo(geo, block, k).segments[segment];
                let (center, shape) = self.ellipsoid_at(term, k, geo);
                let d = seg.base - center;
                let mr = shape * seg.direction;
                let alpha = -d.dot(&mr) / seg.direction.dot(&mr);
                let w = d + self.proj.value(alpha) * seg.direction;
                w.dot(&(shape * w)) - 1.0 - self.collision_margin
            }
            RowKind::Static { block, point } => {
                let (fp, drop) = &self.blocks[block].static_points[point];
                Self::step_geo(geo, block, k).pose.point(fp).z - drop - self.env.floor()
            }
            RowKind::QMin { block, joint } => states[block][k].q[joint] - self.blocks[block].bounds.q_min[joint],
            RowKind::QMax { block, joint } => self.blocks[block].bounds.q_max[joint] - states[block][k].q[joint],
            RowKind::QdMin { block, joint } => states[block][k].qd[joint] + self.blocks[block].bounds.qd_max[joint],
            RowKind::QdMax { block, joint } => self.blocks[block].bounds.qd_max[joint] - states[block][k].qd[joint],
        }
    }

    pub(crate) fn row_gradient(&self, row: &Row, geo: &Geometry) -> RowGradient {
        let k = row.k;
        let unit = |block: usize, joint: usize, sign: f64| {
            let mut v = vec![0.0; self.blocks[block].dof()];
            v[joint] = sign;
            v
        };
        let zeros = |block: usize| vec![0.0; self.blocks[block].dof()];
        let parts = match row.kind {
            RowKind::Collision(t) => {
                let term = &self.terms[t];
                let (block, segment) = match *term {
                    CollisionTerm::Frozen { block, segment, .. } | CollisionTerm::Coupled { block, segment, .. } => {
                        (block, segment)
                    }
                };
                let sg = Self::step_geo(geo, block, k);
                let (center, shape) = self.ellipsoid_at(term, k, geo);
                let g = els_margin_gradient(&sg.segments[segment], &center, &shape, self.proj);
                let mut dq = zeros(block);
                let spec = &self.blocks[block].model.segments[segment];
                chain_segment_gradient(&sg.pose, spec, &g.d_base, &g.d_direction, &mut dq);
                let mut parts = vec![(block, dq, None)];
                if let CollisionTerm::Coupled { other_block, ellipsoid, .. } = *term {
                    let og = Self::step_geo(geo, other_block, k);
                    let spec = &self.blocks[other_block].model.ellipsoids[ellipsoid];
                    let mut dq = zeros(other_block);
                    chain_ellipsoid_gradient(&og.pose, spec, &shape, &g.d_center, &g.d_shape, &mut dq);
                    parts.push((other_block, dq, None));
                }
                parts
            }
            RowKind::Static { block, point } => {
                let (fp, _) = &self.blocks[block].static_points[point];
                let sg = Self::step_geo(geo, block, k);
                let p = sg.pose.point(fp);
                let mut cols = vec![Vector3::zeros(); self.blocks[block].dof()];
                sg.pose.point_jacobian(fp.frame, &p, &mut cols);
                vec![(block, cols.iter().map(|c| c.z).collect(), None)]
            }
            RowKind::QMin { block, joint } => vec![(block, unit(block, joint, 1.0), None)],
            RowKind::QMax { block, joint } => vec![(block, unit(block, joint, -1.0), None)],
            RowKind::QdMin { block, joint } => vec![(block, zeros(block), Some(unit(block, joint, 1.0)))],
            RowKind::QdMax { block, joint } => vec![(block, zeros(block), Some(unit(block, joint, -1.0)))],
        };
        RowGradient { parts }
    }

    /// Shifts per-row multipliers one stage forward, repeating the last stage.
    pub(crate) fn shift_multipliers(&self, lambda: &[f64]) -> Vec<f64> {
        if lambda.len() != self.rows.len() {
            return vec![0.0; self.rows.len()];
        }
        let mut out = lambda.to_vec();
        let mut start = 0;
        for size in self.group_sizes {
            let per_k = size / self.horizon;
            if per_k > 0 {
                let group = &lambda[start..start + size];
                let dst = &mut out[start..start + size];
                dst[..size - per_k].copy_from_slice(&group[per_k..]);
                dst[size - per_k..].copy_from_slice(&group[size - per_k..]);
            }
            start += size;
        }
        out
    }
}

/// Gradient of the input-only cost terms, per stage.
fn input_cost_gradient(block: &OcpBlock, inputs: &[ControlInput], ts: f64) -> Vec<DVector<f64>> {
    let np = inputs.len();
    let w = &block.weights;
    let mut g: Vec<DVector<f64>> = inputs.iter().map(|u| 2.0 * w.ru.component_mul(u)).collect();
    let inv2 = 1.0 / (ts * ts);
    for k in 0..np.saturating_sub(1) {
        let d = 2.0 * inv2 * w.rd.component_mul(&(&inputs[k + 1] - &inputs[k]));
        g[k + 1] += &d;
        g[k] -= &d;
    }
    g[0] += 2.0 * inv2 * w.rd.component_mul(&(&inputs[0] - &block.u_prev));
    g
}

/// Builds one agent's problem against frozen neighbour predictions.
///
/// `neighbor_models` is indexed by robot id.
pub fn build_problem(
    agent: &AgentConfig,
    x_s: &JointState,
    x_f: &JointState,
    u_prev: &ControlInput,
    neighbor_preds: &BTreeMap<usize, PredictedTrajectory>,
    neighbor_models: &[Arc<ManipulatorModel>],
) -> Result<OcpProblem> {
    let block = OcpBlock::new(agent, x_s.clone(), x_f.clone(), u_prev.clone())?;
    let mut neighbors = Vec::new();
    let mut index = BTreeMap::new();
    for robot in agent.pair_set.neighbors() {
        let pred = neighbor_preds.get(&robot).ok_or(Error::StaleNeighbor { robot })?;
        if pred.states.len() != agent.horizon + 1 {
            return Err(Error::HorizonMismatch { expected: agent.horizon + 1, got: pred.states.len() });
        }
        let model = neighbor_models
            .get(robot)
            .ok_or_else(|| Error::Dimension(format!("no model for robot {robot}")))?;
        index.insert(robot, neighbors.len());
        neighbors.push(FrozenNeighbor::new(model, pred)?);
    }
    let terms = agent
        .pair_set
        .pairs
        .iter()
        .map(|p| CollisionTerm::Frozen { block: 0, segment: p.segment, neighbor: index[&p.other], ellipsoid: p.ellipsoid })
        .collect();
    Ok(OcpProblem::assemble(vec![block], neighbors, terms, agent))
}

/// Builds the joint problem over all robots: every pair in every agent's pair
/// set becomes a coupled term between two decision blocks.
pub fn build_centralized_problem(
    agents: &[AgentConfig],
    x_s: &[JointState],
    x_f: &[JointState],
    u_prev: &[ControlInput],
) -> Result<OcpProblem> {
    let first = agents.first().ok_or_else(|| Error::InvalidScenario("no robots".into()))?;
    if x_s.len() != agents.len() || x_f.len() != agents.len() || u_prev.len() != agents.len() {
        return Err(Error::Dimension("one state, target and input per robot required".into()));
    }
    let mut blocks = Vec::with_capacity(agents.len());
    for (i, a) in agents.iter().enumerate() {
        if a.horizon != first.horizon {
            return Err(Error::HorizonMismatch { expected: first.horizon, got: a.horizon });
        }
        blocks.push(OcpBlock::new(a, x_s[i].clone(), x_f[i].clone(), u_prev[i].clone())?);
    }
    let block_of: BTreeMap<usize, usize> = agents.iter().enumerate().map(|(i, a)| (a.robot_id, i)).collect();
    let mut terms = Vec::new();
    for (i, a) in agents.iter().enumerate() {
        for p in &a.pair_set.pairs {
            let other_block = *block_of.get(&p.other).ok_or(Error::StaleNeighbor { robot: p.other })?;
            terms.push(CollisionTerm::Coupled { block: i, segment: p.segment, other_block, ellipsoid: p.ellipsoid });
        }
    }
    Ok(OcpProblem::assemble(blocks, Vec::new(), terms, first))
}

/// States and inputs of every block, indexed `[block][k]`.
pub type BlockTrajectories = (Vec<Vec<JointState>>, Vec<Vec<ControlInput>>);

/// Solver diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub outer_iterations: usize,
    pub solve_time: Duration,
    pub converged: bool,
    pub max_violation: f64,
    pub stationarity: f64,
}

/// Optimal trajectories of every decision block.
#[derive(Debug, Clone)]
pub struct OcpSolution {
    /// `[block][k]`, `k = 0..=Np`.
    pub states: Vec<Vec<JointState>>,
    /// `[block][k]`, `k = 0..Np`.
    pub inputs: Vec<Vec<ControlInput>>,
    pub objective: f64,
    pub multipliers: Vec<f64>,
    pub stats: SolveStats,
}

impl OcpSolution {
    /// Warm start for the next step: drop the first stage and repeat the last input.
    pub fn shifted(&self, problem: &OcpProblem) -> OcpSolution {
        let inputs = self
            .inputs
            .iter()
            .map(|us| {
                let mut v: Vec<ControlInput> = us[1..].to_vec();
                v.push(us.last().expect("non-empty horizon").clone());
                v
            })
            .collect();
        OcpSolution {
            states: self.states.clone(),
            inputs,
            objective: self.objective,
            multipliers: problem.shift_multipliers(&self.multipliers),
            stats: SolveStats::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::collision::{build_pair_set, CollisionPair};
    use crate::kinematics::Pose;

    fn planar_agent(robot: usize, model: ManipulatorModel, horizon: usize) -> AgentConfig {
        let n = model.dof();
        AgentConfig::new(robot, Arc::new(model), CostWeights::identity(n), horizon, 0.2).unwrap()
    }

    #[test]
    fn stage_cost_examples() {
        let w = CostWeights::identity(1);
        let xf = JointState::zeros(1);
        let u0 = DVector::zeros(1);
        assert_eq!(stage_cost(&xf, &u0, &u0, &xf, &w, 0.2), 0.0);
        let x = JointState::from_stacked(&[1.0, 0.0]).unwrap();
        let u = DVector::from_element(1, 2.0);
        assert!((stage_cost(&x, &u, &u, &xf, &w, 0.2) - 5.0).abs() < 1e-15);
    }

    #[test]
    fn stage_cost_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let n = 3;
            let r = |rng: &mut ChaCha8Rng, len| DVector::from_fn(len, |_, _| rng.random_range(-2.0..2.0));
            let w = CostWeights::new(
                r(&mut rng, 6).abs(),
                r(&mut rng, 6).abs(),
                r(&mut rng, 3).abs(),
                r(&mut rng, 3).abs(),
            )
            .unwrap();
            let x = JointState::from_stacked(r(&mut rng, 6).as_slice()).unwrap();
            let xf = JointState::from_stacked(r(&mut rng, 6).as_slice()).unwrap();
            let (u, un) = (r(&mut rng, 3), r(&mut rng, 3));
            let ts = 0.1;
            let mut expect = 0.0;
            let xe = x.stacked() - xf.stacked();
            for i in 0..2 * n {
                expect += w.qx[i] * xe[i] * xe[i];
            }
            for i in 0..n {
                expect += w.ru[i] * u[i] * u[i];
                let d = (un[i] - u[i]) / ts;
                expect += w.rd[i] * d * d;
            }
            assert!((stage_cost(&x, &u, &un, &xf, &w, ts) - expect).abs() < 1e-10 * expect.max(1.0));
            let mut te = 0.0;
            for i in 0..2 * n {
                te += w.qf[i] * xe[i] * xe[i];
            }
            assert!((terminal_cost(&x, &xf, &w) - te).abs() < 1e-12 * te.max(1.0));
        }
    }

    #[test]
    fn terminal_weight_scaling() {
        let qx = [1.0, 1.0, 1.0, 0.2, 0.2, 1.0, 1.0, 1.0, 1.0, 0.1, 0.1, 0.1];
        let w = CostWeights::with_terminal_factor(&qx, 10.0, 1.0, 1.0).unwrap();
        let x = JointState::from_stacked(&[0.3; 12]).unwrap();
        let xf = JointState::zeros(6);
        let stage = state_error(&x, &xf, &w.qx);
        assert!((terminal_cost(&x, &xf, &w) - 10.0 * stage).abs() < 1e-12);
        assert_eq!(terminal_cost(&xf, &xf, &w), 0.0);
    }

    fn two_planar(spacing: f64) -> Vec<ManipulatorModel> {
        let m = ManipulatorModel::planar(&[0.4, 0.3]);
        vec![
            m.with_base_pose(Pose::from_position_yaw(Vector3::zeros(), 0.0)),
            m.with_base_pose(Pose::from_position_yaw(Vector3::new(spacing, 0.0, 0.0), std::f64::consts::PI)),
        ]
    }

    #[test]
    fn constraint_counts() {
        let models = two_planar(1.0);
        let sets = build_pair_set(&models, None).unwrap();
        let arcs: Vec<_> = models.iter().cloned().map(Arc::new).collect();
        let mut agent = planar_agent(0, models[0].clone(), 20);
        agent.pair_set = sets[0].clone();
        let x = JointState::zeros(2);
        let pred = PredictedTrajectory::stationary(1, 0, &x, 20);
        let preds = BTreeMap::from([(1, pred)]);
        let p = build_problem(&agent, &x, &x, &DVector::zeros(2), &preds, &arcs).unwrap();
        assert_eq!(p.dynamic_collision_count(), 4 * 20);
        // Two segment bases, one attached to the base frame, plus the flange.
        assert_eq!(p.static_count(), 2 * 20);
        let z = p.pack(&[vec![x.clone(); 21]], &[vec![DVector::zeros(2); 20]]);
        assert_eq!(p.inequality_constraints(&z).unwrap().len(), p.dynamic_collision_count() + p.static_count());

        agent.pair_set = CollisionPairSet::default();
        let p = build_problem(&agent, &x, &x, &DVector::zeros(2), &BTreeMap::new(), &arcs).unwrap();
        assert_eq!(p.dynamic_collision_count(), 0);
    }

    #[test]
    fn missing_neighbor_is_stale() {
        let models = two_planar(1.0);
        let arcs: Vec<_> = models.iter().cloned().map(Arc::new).collect();
        let mut agent = planar_agent(0, models[0].clone(), 5);
        agent.pair_set = CollisionPairSet { pairs: vec![CollisionPair { other: 1, ellipsoid: 0, segment: 1 }] };
        let x = JointState::zeros(2);
        let err = build_problem(&agent, &x, &x, &DVector::zeros(2), &BTreeMap::new(), &arcs).unwrap_err();
        assert!(matches!(err, Error::StaleNeighbor { robot: 1 }));
        let short = BTreeMap::from([(1, PredictedTrajectory::stationary(1, 0, &x, 3))]);
        let err = build_problem(&agent, &x, &x, &DVector::zeros(2), &short, &arcs).unwrap_err();
        assert!(matches!(err, Error::HorizonMismatch { expected: 6, got: 4 }));
    }

    fn random_point(p: &OcpProblem, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..p.num_variables()).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn check_gradients(p: &OcpProblem, z: &[f64]) {
        let h = 1e-6;
        let g = p.objective_gradient(z).unwrap();
        let c0 = p.inequality_constraints(z).unwrap();
        let mut jac = vec![vec![0.0; z.len()]; c0.len()];
        for (r, c, v) in p.inequality_jacobian(z).unwrap() {
            jac[r][c] += v;
        }
        let e0 = p.equality_constraints(z).unwrap();
        let mut ejac = vec![vec![0.0; z.len()]; e0.len()];
        for (r, c, v) in p.equality_jacobian(z).unwrap() {
            ejac[r][c] += v;
        }
        let close = |fd: f64, an: f64| (fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1.0);
        for i in 0..z.len() {
            let mut zp = z.to_vec();
            let mut zm = z.to_vec();
            zp[i] += h;
            zm[i] -= h;
            let fd = (p.objective(&zp).unwrap() - p.objective(&zm).unwrap()) / (2.0 * h);
            assert!(close(fd, g[i]), "objective var {i}: {fd} vs {}", g[i]);
            let cp = p.inequality_constraints(&zp).unwrap();
            let cm = p.inequality_constraints(&zm).unwrap();
            for r in 0..c0.len() {
                let fd = (cp[r] - cm[r]) / (2.0 * h);
                assert!(close(fd, jac[r][i]), "row {r} var {i}: {fd} vs {}", jac[r][i]);
            }
            let ep = p.equality_constraints(&zp).unwrap();
            let em = p.equality_constraints(&zm).unwrap();
            for r in 0..e0.len() {
                let fd = (ep[r] - em[r]) / (2.0 * h);
                assert!(close(fd, ejac[r][i]), "equality row {r} var {i}");
            }
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut m = ManipulatorModel::planar(&[0.4, 0.3]);
        m.dh_rows[0].alpha = 0.6;
        m.dh_rows[1].d = 0.1;
        let models = vec![
            m.with_base_pose(Pose::from_position_yaw(Vector3::zeros(), 0.0)),
            m.with_base_pose(Pose::from_position_yaw(Vector3::new(0.7, 0.1, 0.0), 2.5)),
        ];
        let sets = build_pair_set(&models, None).unwrap();
        let arcs: Vec<_> = models.iter().cloned().map(Arc::new).collect();
        let mut agents: Vec<AgentConfig> = (0..2).map(|i| planar_agent(i, models[i].clone(), 3)).collect();
        for (a, s) in agents.iter_mut().zip(&sets) {
            a.pair_set = s.clone();
            a.env = StaticEnvironment::new(0.0, 0.02).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let xs = JointState::from_stacked(&[0.1, 0.2, 0.0, 0.1]).unwrap();
        let xf = JointState::from_stacked(&[1.0, -0.5, 0.0, 0.0]).unwrap();
        let pred = PredictedTrajectory::stationary(1, 0, &JointState::from_stacked(&[0.3, 0.4, 0.0, 0.0]).unwrap(), 3);
        let preds = BTreeMap::from([(1, pred)]);
        let dmpc = build_problem(&agents[0], &xs, &xf, &DVector::from_element(2, 0.3), &preds, &arcs).unwrap();
        let cmpc = build_centralized_problem(
            &agents,
            &[xs.clone(), xs.clone()],
            &[xf.clone(), xf.clone()],
            &[DVector::zeros(2), DVector::zeros(2)],
        )
        .unwrap();
        for p in [&dmpc, &cmpc] {
            for _ in 0..3 {
                let z = random_point(p, &mut rng);
                check_gradients(p, &z);
            }
        }
    }

    #[test]
    fn multiplier_shift_moves_stages() {
        let models = two_planar(1.0);
        let sets = build_pair_set(&models, None).unwrap();
        let arcs: Vec<_> = models.iter().cloned().map(Arc::new).collect();
        let mut agent = planar_agent(0, models[0].clone(), 3);
        agent.pair_set = sets[0].clone();
        let x = JointState::zeros(2);
        let preds = BTreeMap::from([(1, PredictedTrajectory::stationary(1, 0, &x, 3))]);
        let p = build_problem(&agent, &x, &x, &DVector::zeros(2), &preds, &arcs).unwrap();
        let lambda: Vec<f64> = p.rows.iter().map(|r| r.k as f64).collect();
        let shifted = p.shift_multipliers(&lambda);
        for (r, v) in p.rows.iter().zip(&shifted) {
            assert_eq!(*v, (r.k + 1).min(3) as f64);
        }
    }
}
