//! Per-joint double integrator and its exact zero-order-hold discretisation.
//!
//! States are stacked as `x = [q, q̇]`, inputs are joint accelerations.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kinematics::ManipulatorModel;

#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
}

impl JointState {
    pub fn new(q: DVector<f64>, qd: DVector<f64>) -> Result<Self> {
        if q.len() != qd.len() {
            return Err(Error::Dimension(format!("q has {} entries, qd has {}", q.len(), qd.len())));
        }
        Ok(Self { q, qd })
    }

    pub fn at_rest(q: &[f64]) -> Self {
        Self { q: DVector::from_column_slice(q), qd: DVector::zeros(q.len()) }
    }

    pub fn zeros(n: usize) -> Self {
        Self { q: DVector::zeros(n), qd: DVector::zeros(n) }
    }

    /// From the stacked `[q, q̇]` form.
    pub fn from_stacked(x: &[f64]) -> Result<Self> {
        if !x.len().is_multiple_of(2) {
            return Err(Error::Dimension(format!("stacked state has odd length {}", x.len())));
        }
        let n = x.len() / 2;
        Ok(Self { q: DVector::from_column_slice(&x[..n]), qd: DVector::from_column_slice(&x[n..]) })
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    pub fn stacked(&self) -> DVector<f64> {
        let n = self.dof();
        DVector::from_iterator(2 * n, self.q.iter().chain(self.qd.iter()).copied())
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qd.iter()).all(|v| v.is_finite())
    }

    /// Full-state Euclidean distance.
    pub fn distance(&self, other: &JointState) -> f64 {
        ((&self.q - &other.q).norm_squared() + (&self.qd - &other.qd).norm_squared()).sqrt()
    }
}

pub type ControlInput = DVector<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDynamics {
    pub a_d: DMatrix<f64>,
    pub b_d: DMatrix<f64>,
    pub ts: f64,
}

/// Exact discretisation of `N` decoupled double integrators with sampling time `ts`.
pub fn discretize(n: usize, ts: f64) -> DiscreteDynamics {
    let mut a_d = DMatrix::identity(2 * n, 2 * n);
    let mut b_d = DMatrix::zeros(2 * n, n);
    for j in 0..n {
        a_d[(j, n + j)] = ts;
        b_d[(j, j)] = 0.5 * ts * ts;
        b_d[(n + j, j)] = ts;
    }
    DiscreteDynamics { a_d, b_d, ts }
}

impl DiscreteDynamics {
    pub fn dof(&self) -> usize {
        self.b_d.ncols()
    }

    /// `x⁺ = A_d x + B_d u`, evaluated joint by joint.
    pub fn step(&self, x: &JointState, u: &ControlInput) -> JointState {
        let ts = self.ts;
        let half = 0.5 * ts * ts;
        let q = DVector::from_iterator(x.dof(), (0..x.dof()).map(|j| x.q[j] + ts * x.qd[j] + half * u[j]));
        let qd = DVector::from_iterator(x.dof(), (0..x.dof()).map(|j| x.qd[j] + ts * u[j]));
        JointState { q, qd }
    }

    pub fn rollout(&self, x0: &JointState, inputs: &[ControlInput]) -> Vec<JointState> {
        let mut out = Vec::with_capacity(inputs.len() + 1);
        out.push(x0.clone());
        for u in inputs {
            let next = self.step(out.last().expect("non-empty"), u);
            out.push(next);
        }
        out
    }

    /// Least-squares input that best explains the transition `x → x⁺`.
    pub fn infer_input(&self, x: &JointState, next: &JointState) -> ControlInput {
        let ts = self.ts;
        if ts == 0.0 {
            return DVector::zeros(x.dof());
        }
        // Per joint minimise |q⁺ − q − ts q̇ − ts²/2 u|² + |q̇⁺ − q̇ − ts u|².
        let b1 = 0.5 * ts * ts;
        let norm = b1 * b1 + ts * ts;
        DVector::from_iterator(
            x.dof(),
            (0..x.dof()).map(|j| {
                let r1 = next.q[j] - x.q[j] - ts * x.qd[j];
                let r2 = next.qd[j] - x.qd[j];
                (b1 * r1 + ts * r2) / norm
            }),
        )
    }
}

/// Box sets for states and inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub q_min: DVector<f64>,
    pub q_max: DVector<f64>,
    pub qd_max: DVector<f64>,
    pub u_max: DVector<f64>,
}

pub fn bounds(model: &ManipulatorModel) -> Bounds {
    Bounds {
        q_min: DVector::from_iterator(model.dof(), model.joint_limits.iter().map(|l| l.0)),
        q_max: DVector::from_iterator(model.dof(), model.joint_limits.iter().map(|l| l.1)),
        qd_max: DVector::from_column_slice(&model.velocity_limits),
        u_max: DVector::from_column_slice(&model.acceleration_limits),
    }
}

impl Bounds {
    pub fn dof(&self) -> usize {
        self.u_max.len()
    }

    /// Largest amount by which `x` leaves the state box (0 inside).
    pub fn state_violation(&self, x: &JointState) -> f64 {
        let mut worst: f64 = 0.0;
        for j in 0..self.dof() {
            worst = worst
                .max(self.q_min[j] - x.q[j])
                .max(x.q[j] - self.q_max[j])
                .max(x.qd[j].abs() - self.qd_max[j]);
        }
        worst
    }

    pub fn input_violation(&self, u: &ControlInput) -> f64 {
        (0..self.dof()).map(|j| u[j].abs() - self.u_max[j]).fold(0.0, f64::max)
    }

    pub fn contains_state(&self, x: &JointState, tol: f64) -> bool {
        self.state_violation(x) <= tol
    }

    pub fn contains_input(&self, u: &ControlInput, tol: f64) -> bool {
        self.input_violation(u) <= tol
    }

    pub fn clamp_input(&self, u: &ControlInput) -> ControlInput {
        DVector::from_iterator(self.dof(), (0..self.dof()).map(|j| u[j].clamp(-self.u_max[j], self.u_max[j])))
    }

    /// Admissible input that brings the joint velocities to zero as fast as possible.
    pub fn braking_input(&self, x: &JointState, ts: f64) -> ControlInput {
        if ts <= 0.0 {
            return DVector::zeros(self.dof());
        }
        self.clamp_input(&(-&x.qd / ts))
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// `exp(M)` by scaling and squaring a Taylor series.
    fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
        let norm = m.abs().max();
        let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
        let scaled = m / 2f64.powi(s);
        let mut term = DMatrix::identity(m.nrows(), m.ncols());
        let mut sum = term.clone();
        for k in 1..30 {
            term = &term * &scaled / k as f64;
            sum += &term;
        }
        for _ in 0..s {
            sum = &sum * &sum;
        }
        sum
    }

    fn oracle(n: usize, ts: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut m = DMatrix::zeros(3 * n, 3 * n);
        for j in 0..n {
            m[(j, n + j)] = 1.0;
            m[(n + j, 2 * n + j)] = 1.0;
        }
        let e = expm(&(m * ts));
        (e.view((0, 0), (2 * n, 2 * n)).into_owned(), e.view((0, 2 * n), (2 * n, n)).into_owned())
    }

    #[test]
    fn closed_form_values() {
        let d = discretize(1, 0.2);
        assert_eq!(d.a_d, DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 1.0]));
        assert!((d.b_d[(0, 0)] - 0.02).abs() < 1e-15 && (d.b_d[(1, 0)] - 0.2).abs() < 1e-15);
        let z = discretize(3, 0.0);
        assert_eq!(z.a_d, DMatrix::identity(6, 6));
        assert_eq!(z.b_d, DMatrix::zeros(6, 3));
    }

    #[test]
    fn matches_matrix_exponential() {
        for ts in [0.05, 0.2, 1.0] {
            let d = discretize(3, ts);
            let (a, b) = oracle(3, ts);
            assert!((&d.a_d - a).abs().max() < 1e-12);
            assert!((&d.b_d - b).abs().max() < 1e-12);
        }
    }

    #[test]
    fn step_examples() {
        let d = discretize(2, 0.2);
        let x = d.step(&JointState::zeros(2), &DVector::from_element(2, 1.0));
        assert!((x.q[0] - 0.02).abs() < 1e-15 && (x.qd[1] - 0.2).abs() < 1e-15);
        let x0 = JointState::new(DVector::from_vec(vec![0.1, -0.3]), DVector::from_vec(vec![0.7, -1.1])).unwrap();
        let x1 = d.step(&x0, &DVector::zeros(2));
        assert_eq!(x1.qd, x0.qd);
        let u = DVector::from_vec(vec![0.5, -2.0]);
        let traj = d.rollout(&JointState::zeros(2), &vec![u.clone(); 10]);
        let t = 10.0 * 0.2;
        for j in 0..2 {
            assert!((traj[10].q[j] - 0.5 * t * t * u[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn rollout_matches_matrix_loop() {
        let d = discretize(3, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs: Vec<ControlInput> =
            (0..15).map(|_| DVector::from_fn(3, |_, _| rng.random_range(-3.0..3.0))).collect();
        let x0 = JointState::from_stacked(&[0.1, 0.2, 0.3, -1.0, 0.5, 0.0]).unwrap();
        let traj = d.rollout(&x0, &inputs);
        let mut x = x0.stacked();
        for (k, u) in inputs.iter().enumerate() {
            x = &d.a_d * &x + &d.b_d * u;
            assert!((traj[k + 1].stacked() - &x).abs().max() < 1e-12);
        }
        assert_eq!(traj[0], x0);
    }

    #[test]
    fn inferred_input_recovers_exact_input() {
        let d = discretize(2, 0.2);
        let x0 = JointState::from_stacked(&[0.1, 0.2, 0.3, -1.0]).unwrap();
        let u = DVector::from_vec(vec![1.5, -0.25]);
        let x1 = d.step(&x0, &u);
        assert!((d.infer_input(&x0, &x1) - u).abs().max() < 1e-12);
    }

    #[test]
    fn bounds_from_model() {
        let mut m = crate::kinematics::ManipulatorModel::planar(&[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        m.velocity_limits = vec![PI, PI, PI, 2.0 * PI, 2.0 * PI, 2.0 * PI];
        m.acceleration_limits = m.velocity_limits.clone();
        let b = bounds(&m);
        assert_eq!(b.qd_max[3], 2.0 * PI);
        assert!(b.contains_state(&JointState::zeros(6), 0.0));
        assert!(b.contains_input(&DVector::zeros(6), 0.0));
        let mut u = DVector::zeros(6);
        u[0] = PI;
        assert!(b.contains_input(&u, 0.0));
        u[0] = PI + 1e-9;
        assert!(!b.contains_input(&u, 0.0));
        assert!(b.input_violation(&u) > 0.0);
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        proptest! {
            #[test]
            fn step_is_affine(
                a in proptest::array::uniform6(-2.0f64..2.0),
                b in proptest::array::uniform6(-2.0f64..2.0),
                ua in proptest::array::uniform3(-2.0f64..2.0),
                ub in proptest::array::uniform3(-2.0f64..2.0),
                ts in 0.0f64..1.0,
            ) {
                let d = discretize(3, ts);
                let xa = JointState::from_stacked(&a).unwrap();
                let xb = JointState::from_stacked(&b).unwrap();
                let ua = DVector::from_column_slice(&ua);
                let ub = DVector::from_column_slice(&ub);
                let sum = JointState::from_stacked((xa.stacked() + xb.stacked()).as_slice()).unwrap();
                let lhs = d.step(&sum, &(&ua + &ub)).stacked();
                let rhs = d.step(&xa, &ua).stacked() + d.step(&xb, &ub).stacked()
                    - d.step(&JointState::zeros(3), &DVector::zeros(3)).stacked();
                prop_assert!((lhs - rhs).abs().max() < 1e-12);
            }
        }
    }
}
