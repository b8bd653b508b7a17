//! Scenario generation: module layouts, object placement and joint targets.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::kinematics::{ManipulatorModel, Pose};
use crate::sim::ik::ik_solve;
use crate::sim::rsa::{place_objects_rsa, Region};
use crate::sim::scenario::{DeadlockFile, RobotFile, ScenarioFile, TaskFile, TransportKind, WeightsFile};

/// Height of the gripper tip above the table at a pick or place pose.
pub const GRASP_HEIGHT: f64 = 0.08;

/// Base position and yaw of each robot. Robots stand on modules of side
/// `spacing`; one or two rows face each other across a shared workspace.
pub fn module_layout(robots: usize, spacing: f64, table_height: f64) -> Result<Vec<([f64; 3], f64)>> {
    let front = -std::f64::consts::FRAC_PI_2;
    let back = std::f64::consts::FRAC_PI_2;
    let z = table_height;
    Ok(match robots {
        1 => vec![([0.0, 0.0, z], front)],
        2 => vec![([0.0, 0.0, z], front), ([spacing, 0.0, z], front)],
        3 => vec![([0.0, 0.0, z], front), ([spacing, 0.0, z], front), ([2.0 * spacing, 0.0, z], front)],
        4 => vec![
            ([0.0, 0.0, z], front),
            ([spacing, 0.0, z], front),
            ([spacing, 1.2 * spacing, z], back),
            ([0.0, 1.2 * spacing, z], back),
        ],
        m => return Err(Error::InvalidScenario(format!("layouts exist for 1 to 4 robots, got {m}"))),
    })
}

/// Tool-down initial guess pointing the arm at `point`.
fn guess(model: &ManipulatorModel, point: &Vector3<f64>) -> Vec<f64> {
    let local = model.base_pose.rotation.transpose() * (point - model.base_pose.position);
    let theta = local.y.atan2(local.x) + std::f64::consts::PI;
    let theta = (theta + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
    let h = std::f64::consts::FRAC_PI_2;
    vec![theta, -h, h, -h, -h, 0.0]
}

/// Joint target placing the tool point at `point`.
pub fn joint_target(model: &ManipulatorModel, point: &Vector3<f64>) -> Result<Vec<f64>> {
    let mut q0 = model.neutral_pose.clone();
    if model.dof() == 6 {
        q0 = guess(model, point);
    }
    Ok(ik_solve(model, point, &q0)?.as_slice().to_vec())
}

/// Request for a generated pick-and-place scenario.
#[derive(Debug, Clone)]
pub struct GenRequest {
    pub robots: usize,
    pub objects: usize,
    pub seed: u64,
    /// Model path as written into the scenario file.
    pub model_path: String,
    pub model: ManipulatorModel,
    pub spacing: f64,
    pub min_separation: f64,
    pub horizon: usize,
    pub ts: f64,
    pub step_budget: u64,
}

/// Workspace shared by the robots of a layout.
pub fn shared_region(robots: usize, spacing: f64, table_height: f64) -> Region {
    let z = table_height + GRASP_HEIGHT;
    let (x0, x1) = match robots {
        1 => (-0.2, 0.2),
        3 => (0.1 * spacing, 1.9 * spacing),
        _ => (0.1 * spacing, 0.9 * spacing),
    };
    let (y0, y1) = if robots == 4 { (0.6 * spacing - 0.12, 0.6 * spacing + 0.12) } else { (0.3, 0.5) };
    Region { min: Vector3::new(x0, y0, z), max: Vector3::new(x1, y1, z) }
}

/// Objects are placed by RSA in the shared workspace and each one goes to
/// the robot with the nearest base; a robot picks its objects and drops them
/// at a slot on the outer side of its own module.
pub fn generate_scenario(req: &GenRequest) -> Result<ScenarioFile> {
    let table = crate::collision::StaticEnvironment::default().table_height;
    let layout = module_layout(req.robots, req.spacing, table)?;
    let region = shared_region(req.robots, req.spacing, table);
    let objects = place_objects_rsa(&region, req.objects, req.min_separation, req.seed)?;
    let centre = layout.iter().map(|(b, _)| Vector3::from(*b)).sum::<Vector3<f64>>() / layout.len() as f64;
    let owner: Vec<usize> = objects
        .iter()
        .map(|p| {
            let d = |b: &[f64; 3]| (p.x - b[0]).hypot(p.y - b[1]);
            (0..layout.len()).min_by(|&a, &b| d(&layout[a].0).total_cmp(&d(&layout[b].0))).unwrap_or(0)
        })
        .collect();
    let mut robot = Vec::with_capacity(req.robots);
    for (i, &(base, yaw)) in layout.iter().enumerate() {
        let placed = req.model.with_base_pose(Pose::from_position_yaw(Vector3::from(base), yaw));
        let forward = Vector3::new(-yaw.cos(), -yaw.sin(), 0.0);
        let lateral = Vector3::new(-forward.y, forward.x, 0.0);
        let outward = if (Vector3::from(base) - centre).dot(&lateral) >= 0.0 { 1.0 } else { -1.0 };
        let drop = Vector3::from(base) + 0.3 * forward + 0.2 * outward * lateral + Vector3::new(0.0, 0.0, GRASP_HEIGHT);
        let mut task = Vec::new();
        for (k, p) in objects.iter().enumerate().filter(|(k, _)| owner[*k] == i) {
            let pick = joint_target(&placed, p).map_err(|e| {
                Error::InvalidScenario(format!("object {k} at {:?} is out of reach of robot {i}: {e}", p.as_slice()))
            })?;
            task.push(TaskFile { target: pick, dwell: None });
            task.push(TaskFile { target: joint_target(&placed, &drop)?, dwell: None });
        }
        robot.push(RobotFile {
            model: req.model_path.clone(),
            base,
            yaw,
            initial: req.model.neutral_pose.clone(),
            task,
        });
    }
    Ok(ScenarioFile {
        name: format!("generated_{}r_{}o_seed{}", req.robots, req.objects, req.seed),
        horizon: req.horizon,
        ts: req.ts,
        step_budget: req.step_budget,
        seed: req.seed,
        transport: TransportKind::Inproc,
        table_height: table,
        table_clearance: crate::collision::StaticEnvironment::default().clearance,
        projection_c: 20.0,
        collision_margin: 0.05,
        dwell_steps: 5,
        pruning: None,
        weights: WeightsFile {
            qx: vec![1.0, 1.0, 1.0, 0.2, 0.2, 1.0, 1.0, 1.0, 1.0, 0.1, 0.1, 0.1],
            terminal_factor: 10.0,
            ru: 1.0,
            rd: 1.0,
        },
        deadlock: DeadlockFile::default(),
        robot,
    })
}
