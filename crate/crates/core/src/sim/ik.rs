//! Position-only inverse kinematics of the tool point.

use nalgebra::{DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kinematics::{ChainPose, ManipulatorModel};

pub const IK_TOLERANCE: f64 = 1e-4;
pub const IK_MAX_ITERATIONS: usize = 500;

fn tool_position(model: &ManipulatorModel, q: &[f64]) -> Result<Vector3<f64>> {
    let pose = ChainPose::new(model, q)?;
    Ok(pose.frames()[model.tool_frame()].origin)
}

/// Damped least-squares iteration with adaptive damping, clamped to the
/// joint limits. Succeeds when the tool point is within [`IK_TOLERANCE`] of
/// `target`. When the iteration stalls in a local minimum it restarts from a
/// seeded random configuration; all attempts share the iteration budget.
pub fn ik_solve(model: &ManipulatorModel, target: &Vector3<f64>, initial: &[f64]) -> Result<DVector<f64>> {
    let n = model.dof();
    if initial.len() != n {
        return Err(Error::Dimension(format!("initial guess has {} joints, model has {n}", initial.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut q = DVector::from_column_slice(initial);
    let mut budget = IK_MAX_ITERATIONS;
    let mut best = f64::INFINITY;
    while budget > 0 {
        let (candidate, residual, used) = descend(model, target, q, budget)?;
        budget -= used.min(budget);
        if residual <= IK_TOLERANCE {
            return Ok(candidate);
        }
        best = best.min(residual);
        q = DVector::from_iterator(n, model.joint_limits.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)));
    }
    Err(Error::IkFailed { residual: best, iterations: IK_MAX_ITERATIONS })
}

/// One damped least-squares descent; returns the final configuration, its
/// residual and the iterations used.
fn descend(
    model: &ManipulatorModel,
    target: &Vector3<f64>,
    mut q: DVector<f64>,
    budget: usize,
) -> Result<(DVector<f64>, f64, usize)> {
    let n = model.dof();
    let clamp = |q: &mut DVector<f64>| {
        for (v, &(lo, hi)) in q.iter_mut().zip(&model.joint_limits) {
            *v = v.clamp(lo, hi);
        }
    };
    clamp(&mut q);
    let tool = model.tool_frame();
    let mut err = target - tool_position(model, q.as_slice())?;
    let mut lambda = 1e-2;
    let mut cols = vec![Vector3::zeros(); n];
    let mut checkpoint = err.norm();
    for it in 0..budget {
        if err.norm() <= IK_TOLERANCE {
            return Ok((q, err.norm(), it));
        }
        if it % 25 == 24 {
            if err.norm() > 0.5 * checkpoint {
                return Ok((q, err.norm(), it));
            }
            checkpoint = err.norm();
        }
        let pose = ChainPose::new(model, q.as_slice())?;
        pose.point_jacobian(tool, &pose.frames()[tool].origin, &mut cols);
        let jjt: Matrix3<f64> = cols.iter().map(|c| c * c.transpose()).sum();
        loop {
            if lambda > 1e6 {
                return Ok((q, err.norm(), it + 1));
            }
            let Some(w) = (jjt + Matrix3::identity() * lambda * lambda).lu().solve(&err) else {
                lambda *= 4.0;
                continue;
            };
            let mut candidate = q.clone();
            for (j, c) in cols.iter().enumerate() {
                candidate[j] += c.dot(&w);
            }
            clamp(&mut candidate);
            let e = target - tool_position(model, candidate.as_slice())?;
            if e.norm() < err.norm() - 1e-12 {
                q = candidate;
                err = e;
                lambda = (lambda * 0.5).max(1e-6);
                break;
            }
            lambda *= 4.0;
        }
    }
    Ok((q, err.norm(), budget))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stretched_planar_target() {
        let m = ManipulatorModel::planar(&[1.0, 1.0]);
        let q = ik_solve(&m, &Vector3::new(2.0, 0.0, 0.0), &[0.3, -0.2]).unwrap();
        assert!(q[0].abs() < 2e-2 && q[1].abs() < 3e-2, "{q}");
    }

    #[test]
    fn unreachable_target_fails() {
        let m = ManipulatorModel::planar(&[1.0, 1.0]);
        let err = ik_solve(&m, &Vector3::new(2.5, 0.0, 0.0), &[0.3, -0.2]).unwrap_err();
        assert!(matches!(err, Error::IkFailed { .. }), "{err}");
    }

    #[test]
    fn random_reachable_targets_round_trip() {
        let m = ManipulatorModel::planar(&[0.7, 0.5, 0.3]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(-2.5..2.5)).collect();
            let target = tool_position(&m, &q).unwrap();
            let sol = ik_solve(&m, &target, &[0.1, 0.1, 0.1]).unwrap();
            assert!((tool_position(&m, sol.as_slice()).unwrap() - target).norm() <= IK_TOLERANCE);
            assert!(sol.iter().zip(&m.joint_limits).all(|(v, (lo, hi))| v >= lo && v <= hi));
        }
    }
}
