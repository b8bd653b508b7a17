//! Augmented-Lagrangian solver on the condensed problem.
//!
//! The dynamics are linear, so states are eliminated and only the inputs
//! remain as variables. Input boxes are handled by projection; every other
//! inequality enters a Powell–Hestenes–Rockafellar augmented Lagrangian. Each
//! subproblem is minimised by a projected Newton method whose Hessian model is
//! the exact (constant) objective Hessian plus the Gauss–Newton term of the
//! penalised constraints.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::{Geometry, OcpProblem, OcpSolution, RowGradient, SolveStats};
use crate::dynamics::{discretize, ControlInput, JointState};
use crate::error::{Error, Result};

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;
/// After `SLOW_ITERATIONS` Gauss-Newton iterations that contract the
/// stationarity by less than `SLOW_CONTRACTION`, the secant curvature
/// correction is switched on.
const SLOW_CONTRACTION: f64 = 0.5;
const SLOW_ITERATIONS: usize = 3;

struct Eval {
    states: Vec<Vec<JointState>>,
    inputs: Vec<Vec<ControlInput>>,
    geo: Geometry,
    objective: f64,
    rows: Vec<f64>,
}

struct Condensed<'a> {
    p: &'a OcpProblem,
    offsets: Vec<usize>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl<'a> Condensed<'a> {
    fn new(p: &'a OcpProblem) -> Self {
        let mut offsets = Vec::with_capacity(p.blocks.len());
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        for block in &p.blocks {
            offsets.push(lo.len());
            for _ in 0..p.horizon {
                lo.extend(block.bounds.u_max.iter().map(|v| -v));
                hi.extend(block.bounds.u_max.iter().copied());
            }
        }
        Self { p, offsets, lo, hi }
    }

    fn len(&self) -> usize {
        self.lo.len()
    }

    fn project(&self, u: &mut [f64]) {
        for ((v, lo), hi) in u.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.clamp(*lo, *hi);
        }
    }

    fn split_inputs(&self, u: &[f64]) -> Vec<Vec<ControlInput>> {
        self.p
            .blocks
            .iter()
            .enumerate()
            .map(|(b, block)| {
                let n = block.dof();
                (0..self.p.horizon)
                    .map(|k| DVector::from_column_slice(&u[self.offsets[b] + k * n..self.offsets[b] + (k + 1) * n]))
                    .collect()
            })
            .collect()
    }

    fn evaluate(&self, u: &[f64]) -> Result<Eval> {
        let inputs = self.split_inputs(u);
        let states: Vec<Vec<JointState>> = self
            .p
            .blocks
            .iter()
            .zip(&inputs)
            .map(|(block, us)| discretize(block.dof(), self.p.ts).rollout(&block.x_s, us))
            .collect();
        let objective = self.p.objective_value(&states, &inputs);
        if !objective.is_finite() {
            return Err(Error::NumericalFailure { stage: "objective", iterate: u.to_vec() });
        }
        let geo = self.p.geometry(&states).map_err(|e| match e {
            Error::NumericalFailure { stage, .. } => Error::NumericalFailure { stage, iterate: u.to_vec() },
            other => other,
        })?;
        let rows: Vec<f64> = self.p.rows.iter().map(|r| self.p.row_value(r, &states, &geo)).collect();
        if rows.iter().any(|c| !c.is_finite()) {
            return Err(Error::NumericalFailure { stage: "constraints", iterate: u.to_vec() });
        }
        Ok(Eval { states, inputs, geo, objective, rows })
    }

    /// Objective gradient with respect to the inputs.
    fn objective_gradient(&self, ev: &Eval) -> Vec<f64> {
        let p = self.p;
        let np = p.horizon;
        let ts = p.ts;
        let mut g = vec![0.0; self.len()];
        for (b, block) in p.blocks.iter().enumerate() {
            let n = block.dof();
            let direct = super::input_cost_gradient(block, &ev.inputs[b], ts);
            let mut s0 = vec![0.0; n];
            let mut s1 = vec![0.0; n];
            let mut t0 = vec![0.0; n];
            for m in (0..np).rev() {
                let k = m + 1;
                let w = if k == np { &block.weights.qf } else { &block.weights.qx };
                let x = &ev.states[b][k];
                for j in 0..n {
                    let lq = 2.0 * w[j] * (x.q[j] - block.x_f.q[j]);
                    let lv = 2.0 * w[n + j] * (x.qd[j] - block.x_f.qd[j]);
                    s0[j] += lq;
                    s1[j] += k as f64 * lq;
                    t0[j] += lv;
                    g[self.offsets[b] + m * n + j] =
                        ts * ts * (s1[j] - (m as f64 + 0.5) * s0[j]) + ts * t0[j] + direct[m][j];
                }
            }
        }
        g
    }

    /// Sparse gradient of one row with respect to the inputs.
    fn row_gradient(&self, k: usize, rg: &RowGradient, out: &mut Vec<(usize, f64)>) {
        out.clear();
        let ts = self.p.ts;
        for (b, dq, dqd) in &rg.parts {
            let n = dq.len();
            for m in 0..k {
                let cq = ts * ts * (k as f64 - m as f64 - 0.5);
                for j in 0..n {
                    let v = dq[j] * cq + dqd.as_ref().map_or(0.0, |d| d[j] * ts);
                    if v != 0.0 {
                        out.push((self.offsets[*b] + m * n + j, v));
                    }
                }
            }
        }
    }

    /// Constant Hessian of the objective in the inputs.
    fn objective_hessian(&self) -> Result<DMatrix<f64>> {
        let n = self.len();
        let zero = vec![0.0; n];
        let g0 = self.objective_gradient(&self.evaluate_objective_only(&zero)?);
        let mut h = DMatrix::zeros(n, n);
        let mut e = zero.clone();
        for i in 0..n {
            e[i] = 1.0;
            let gi = self.objective_gradient(&self.evaluate_objective_only(&e)?);
            for r in 0..n {
                h[(r, i)] = gi[r] - g0[r];
            }
            e[i] = 0.0;
        }
        Ok(0.5 * (&h + h.transpose()))
    }

    fn evaluate_objective_only(&self, u: &[f64]) -> Result<Eval> {
        let inputs = self.split_inputs(u);
        let states: Vec<Vec<JointState>> = self
            .p
            .blocks
            .iter()
            .zip(&inputs)
            .map(|(block, us)| discretize(block.dof(), self.p.ts).rollout(&block.x_s, us))
            .collect();
        Ok(Eval { objective: 0.0, rows: Vec::new(), geo: Geometry { steps: Vec::new() }, states, inputs })
    }
}

fn merit(objective: f64, rows: &[f64], lambda: &[f64], mu: f64) -> f64 {
    let mut l = objective;
    for (c, lam) in rows.iter().zip(lambda) {
        if *c < lam / mu {
            l += -lam * c + 0.5 * mu * c * c;
        } else {
            l -= lam * lam / (2.0 * mu);
        }
    }
    l
}

fn max_violation(rows: &[f64]) -> f64 {
    rows.iter().fold(0.0, |acc: f64, c| acc.max(-c))
}

struct InnerResult {
    u: Vec<f64>,
    iterations: usize,
    stationarity: f64,
    converged: bool,
}

/// Solves `(B + θS) d = rhs` for the largest `θ ∈ {1, ½, ¼, ⅛, 0}` whose
/// matrix is positive definite; `B` is the Gauss-Newton model and `S` the
/// secant estimate of the constraint curvature it omits.
fn newton_step(b: &DMatrix<f64>, s: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    for theta in [1.0, 0.5, 0.25, 0.125] {
        if let Some(ch) = (b + s * theta).cholesky() {
            return Some(ch.solve(rhs));
        }
    }
    let scale = b.diagonal().amax().max(1e-12);
    let mut shift = 0.0;
    while shift <= 1e6 * scale {
        let mut reg = b.clone();
        for r in 0..reg.nrows() {
            reg[(r, r)] += shift;
        }
        if let Some(ch) = reg.cholesky() {
            return Some(ch.solve(rhs));
        }
        shift = if shift == 0.0 { 1e-10 * scale } else { shift * 10.0 };
    }
    None
}

#[allow(clippy::too_many_arguments)]
fn minimize_subproblem(
    cond: &Condensed,
    hf: &DMatrix<f64>,
    mut u: Vec<f64>,
    lambda: &[f64],
    mu: f64,
    max_iters: usize,
    tol: f64,
    curvature: &mut DMatrix<f64>,
) -> Result<InnerResult> {
    let n = cond.len();
    let mut sparse = Vec::new();
    let mut stationarity = f64::INFINITY;
    let mut previous: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut slow_iterations = 0;
    for it in 0..max_iters {
        let ev = cond.evaluate(&u)?;
        let l0 = merit(ev.objective, &ev.rows, lambda, mu);
        let mut grad = cond.objective_gradient(&ev);
        let mut b = hf.clone();
        for (i, row) in cond.p.rows.iter().enumerate() {
            let c = ev.rows[i];
            if c >= lambda[i] / mu {
                continue;
            }
            let rg = cond.p.row_gradient(row, &ev.geo);
            cond.row_gradient(row.k, &rg, &mut sparse);
            let w = mu * c - lambda[i];
            for &(a, va) in &sparse {
                grad[a] += w * va;
                for &(bb, vb) in &sparse {
                    b[(a, bb)] += mu * va * vb;
                }
            }
        }
        if let Some((u_prev, g_prev)) = &previous {
            let step = DVector::from_iterator(n, u.iter().zip(u_prev).map(|(a, b)| a - b));
            let ss = step.norm_squared();
            if ss > 1e-24 {
                let y = DVector::from_iterator(n, grad.iter().zip(g_prev).map(|(a, b)| a - b));
                let r = y - &b * &step - &*curvature * &step;
                let rs = r.dot(&step);
                curvature.ger(1.0 / ss, &r, &step, 1.0);
                curvature.ger(1.0 / ss, &step, &r, 1.0);
                curvature.ger(-rs / (ss * ss), &step, &step, 1.0);
            }
        }
        previous = Some((u.clone(), grad.clone()));
        let previous_stationarity = stationarity;
        stationarity = (0..n)
            .map(|i| ((u[i] - grad[i]).clamp(cond.lo[i], cond.hi[i]) - u[i]).abs())
            .fold(0.0, f64::max);
        if stationarity <= tol {
            return Ok(InnerResult { u, iterations: it, stationarity, converged: true });
        }
        if stationarity > SLOW_CONTRACTION * previous_stationarity {
            slow_iterations += 1;
        }
        let slow = slow_iterations >= SLOW_ITERATIONS;
        let eps = stationarity.min(1e-3);
        let active: Vec<bool> = (0..n)
            .map(|i| (u[i] <= cond.lo[i] + eps && grad[i] > 0.0) || (u[i] >= cond.hi[i] - eps && grad[i] < 0.0))
            .collect();
        let free: Vec<usize> = (0..n).filter(|&i| !active[i]).collect();
        let mut d = vec![0.0; n];
        for i in 0..n {
            if active[i] {
                d[i] = -grad[i] / b[(i, i)].max(1e-12);
            }
        }
        if !free.is_empty() {
            let m = free.len();
            let bff = DMatrix::from_fn(m, m, |r, c| b[(free[r], free[c])]);
            let sff = if slow {
                DMatrix::from_fn(m, m, |r, c| curvature[(free[r], free[c])])
            } else {
                DMatrix::zeros(m, m)
            };
            let rhs = DVector::from_iterator(m, free.iter().map(|&i| -grad[i]));
            let step = newton_step(&bff, &sff, &rhs).ok_or_else(|| Error::NumericalFailure {
                stage: "newton system",
                iterate: u.clone(),
            })?;
            for (r, &i) in free.iter().enumerate() {
                d[i] = step[r];
            }
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let mut trial: Vec<f64> = u.iter().zip(&d).map(|(x, di)| x + t * di).collect();
            cond.project(&mut trial);
            let predicted: f64 = (0..n)
                .map(|i| if active[i] { grad[i] * (u[i] - trial[i]) } else { -t * grad[i] * d[i] })
                .sum();
            let ev_t = cond.evaluate(&trial)?;
            let lt = merit(ev_t.objective, &ev_t.rows, lambda, mu);
            if lt <= l0 - ARMIJO * predicted.max(0.0) && lt <= l0 {
                accepted = Some(trial);
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some(next) => {
                let moved = next.iter().zip(&u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                u = next;
                if moved <= 1e-15 {
                    return Ok(InnerResult { u, iterations: it + 1, stationarity, converged: false });
                }
            }
            None => return Ok(InnerResult { u, iterations: it + 1, stationarity, converged: false }),
        }
    }
    Ok(InnerResult { u, iterations: max_iters, stationarity, converged: false })
}

/// Solves the problem from the warm start (inputs used as given, multipliers
/// as given) or from zero inputs.
pub fn solve(problem: &OcpProblem, warm_start: Option<&OcpSolution>) -> Result<OcpSolution> {
    let started = Instant::now();
    let cond = Condensed::new(problem);
    let settings = problem.settings;
    let mut u = vec![0.0; cond.len()];
    let mut lambda = vec![0.0; problem.rows.len()];
    if let Some(ws) = warm_start {
        if ws.inputs.len() == problem.blocks.len() {
            for (b, us) in ws.inputs.iter().enumerate() {
                let n = problem.blocks[b].dof();
                for (k, uk) in us.iter().enumerate().take(problem.horizon) {
                    if uk.len() == n {
                        u[cond.offsets[b] + k * n..cond.offsets[b] + (k + 1) * n].copy_from_slice(uk.as_slice());
                    }
                }
            }
        }
        if ws.multipliers.len() == lambda.len() {
            lambda.copy_from_slice(&ws.multipliers);
        }
    }
    cond.project(&mut u);
    let warm = if warm_start.is_some() {
        let ev = cond.evaluate(&u)?;
        Some((u.clone(), ev.objective, max_violation(&ev.rows)))
    } else {
        None
    };

    let hf = cond.objective_hessian()?;
    let mut mu = settings.initial_penalty;
    let mut curvature = DMatrix::<f64>::zeros(cond.len(), cond.len());
    let mut prev_violation = f64::INFINITY;
    let mut iterations = 0;
    let mut outer = 0;
    let mut converged = false;
    let mut stationarity;
    let mut violation;
    loop {
        outer += 1;
        let inner = minimize_subproblem(
            &cond,
            &hf,
            u,
            &lambda,
            mu,
            settings.max_inner_iters,
            settings.stationarity_tol,
            &mut curvature,
        )?;
        u = inner.u;
        iterations += inner.iterations;
        stationarity = inner.stationarity;
        let ev = cond.evaluate(&u)?;
        violation = max_violation(&ev.rows);
        for (lam, c) in lambda.iter_mut().zip(&ev.rows) {
            *lam = (*lam - mu * c).max(0.0);
        }
        if violation <= settings.feasibility_tol && inner.converged {
            converged = true;
            break;
        }
        if outer >= settings.max_outer_iters {
            break;
        }
        if violation > settings.feasibility_tol && violation > 0.25 * prev_violation {
            mu = (mu * 10.0).min(settings.max_penalty);
        }
        prev_violation = violation;
    }

    let mut ev = cond.evaluate(&u)?;
    if let Some((wu, wj, wv)) = warm {
        if wv <= settings.feasibility_tol && (wj < ev.objective || violation > settings.feasibility_tol) {
            ev = cond.evaluate(&wu)?;
            violation = wv;
        }
    }
    let stats = SolveStats {
        iterations,
        outer_iterations: outer,
        solve_time: started.elapsed(),
        converged,
        max_violation: violation,
        stationarity,
    };
    Ok(OcpSolution { objective: ev.objective, states: ev.states, inputs: ev.inputs, multipliers: lambda, stats })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;
    use std::sync::Arc;

    use nalgebra::DVector;

    use super::*;
    use crate::dynamics::JointState;
    use crate::kinematics::ManipulatorModel;
    use crate::ocp::{build_problem, AgentConfig, CostWeights};

    fn one_joint_agent(horizon: usize) -> AgentConfig {
        let mut m = ManipulatorModel::planar(&[0.5]);
        m.joint_limits = vec![(-10.0, 10.0)];
        m.velocity_limits = vec![10.0];
        m.acceleration_limits = vec![10.0];
        let mut a = AgentConfig::new(0, Arc::new(m), CostWeights::identity(1), horizon, 0.2).unwrap();
        a.env.table_height = -1.0;
        a
    }

    fn problem(agent: &AgentConfig, xs: &[f64], xf: &[f64]) -> OcpProblem {
        build_problem(
            agent,
            &JointState::from_stacked(xs).unwrap(),
            &JointState::from_stacked(xf).unwrap(),
            &DVector::zeros(1),
            &BTreeMap::new(),
            std::slice::from_ref(&agent.model),
        )
        .unwrap()
    }

    /// Dense least-squares oracle: the objective is `|A u − b|²`.
    fn lqr_oracle(p: &OcpProblem) -> f64 {
        let cond = Condensed::new(p);
        let n = cond.len();
        let h = cond.objective_hessian().unwrap();
        let zero = vec![0.0; n];
        let ev0 = cond.evaluate(&zero).unwrap();
        let g0 = DVector::from_vec(cond.objective_gradient(&ev0));
        let u = h.clone().lu().solve(&(-&g0)).unwrap();
        let ev = cond.evaluate(u.as_slice()).unwrap();
        let quad = ev0.objective + g0.dot(&u) + 0.5 * (u.transpose() * &h * &u)[(0, 0)];
        assert!((quad - ev.objective).abs() < 1e-9 * quad.max(1.0));
        ev.objective
    }

    #[test]
    fn unconstrained_matches_least_squares() {
        let agent = one_joint_agent(10);
        let p = problem(&agent, &[0.0, 0.0], &[1.0, 0.0]);
        let sol = solve(&p, None).unwrap();
        assert!(sol.stats.converged);
        let oracle = lqr_oracle(&p);
        assert!((sol.objective - oracle).abs() <= 1e-4, "{} vs {oracle}", sol.objective);
    }

    #[test]
    fn at_target_stays_put() {
        let agent = one_joint_agent(5);
        let p = problem(&agent, &[0.3, 0.0], &[0.3, 0.0]);
        let sol = solve(&p, None).unwrap();
        assert!(sol.stats.converged);
        assert!(sol.objective.abs() < 1e-12);
        assert!(sol.inputs[0].iter().all(|u| u.amax() < 1e-12));
    }

    #[test]
    fn zero_input_box_gives_point_feasible_set() {
        let mut agent = one_joint_agent(5);
        agent.bounds.u_max[0] = 0.0;
        let p = problem(&agent, &[0.0, 0.0], &[1.0, 0.0]);
        let sol = solve(&p, None).unwrap();
        assert!(sol.stats.converged);
        assert!(sol.inputs[0].iter().all(|u| u[0] == 0.0));
        assert!(sol.objective > 0.0);
    }

    #[test]
    fn solution_respects_boxes_and_dynamics() {
        let agent = one_joint_agent(10);
        let mut agent = agent;
        agent.bounds.qd_max[0] = 0.5;
        agent.bounds.u_max[0] = 2.0;
        let p = problem(&agent, &[0.0, 0.0], &[3.0, 0.0]);
        let sol = solve(&p, None).unwrap();
        assert!(sol.stats.converged, "{:?}", sol.stats);
        for x in &sol.states[0] {
            assert!(x.qd[0].abs() <= 0.5 + 1e-6);
        }
        let z = p.pack(&sol.states, &sol.inputs);
        assert!(p.equality_constraints(&z).unwrap().iter().all(|r| r.abs() < 1e-9));
    }

    #[test]
    fn warm_start_never_worsens_a_feasible_start() {
        let agent = one_joint_agent(8);
        let p = problem(&agent, &[0.0, 0.0], &[1.0, 0.0]);
        let sol = solve(&p, None).unwrap();
        let again = solve(&p, Some(&sol)).unwrap();
        assert!(again.objective <= sol.objective + 1e-12);
    }

    #[test]
    fn deterministic() {
        let agent = one_joint_agent(8);
        let p = problem(&agent, &[0.2, -0.1], &[1.0, 0.0]);
        let a = solve(&p, None).unwrap();
        let b = solve(&p, None).unwrap();
        assert_eq!(a.inputs, b.inputs);
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
    }

    #[test]
    fn nan_state_is_a_numerical_failure() {
        let agent = one_joint_agent(3);
        let mut p = problem(&agent, &[0.0, 0.0], &[1.0, 0.0]);
        p.blocks[0].x_s.q[0] = f64::NAN;
        assert!(matches!(solve(&p, None), Err(Error::NumericalFailure { .. })));
    }
}
