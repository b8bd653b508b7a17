//! Ellipsoid–line-segment (ELS) separation, table clearance and link distance.
//!
//! One robot is described by line segments, its neighbour by ellipsoids. The
//! level-set value `H` of an ellipsoid along a segment is a convex quadratic in
//! the segment parameter, so its unconstrained minimiser has a closed form.
//! Clamping that minimiser to `[0, 1]` is replaced by the smooth projection
//! `P̂(α) = α Φ(α) − (α − 1) Φ(α − 1)` with the logistic `Φ(α) = 1 / (1 + e^{−cα})`,
//! which keeps the margin `g = H(b + P̂(α̂) r) − 1` continuously differentiable.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::kinematics::{ChainPose, Ellipsoid, EllipsoidSpec, LineSegment, ManipulatorModel, SegmentSpec};

const EXP_CLAMP: f64 = 40.0;

/// Logistic smoothing of the `[0, 1]` clamp, sharpness `c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothProjection {
    pub c: f64,
}

impl SmoothProjection {
    pub fn new(c: f64) -> Result<Self> {
        if c.is_finite() && c > 0.0 {
            Ok(Self { c })
        } else {
            Err(Error::InvalidScenario(format!("projection sharpness c must be positive, got {c}")))
        }
    }

    fn phi(&self, alpha: f64) -> f64 {
        1.0 / (1.0 + (-(self.c * alpha).clamp(-EXP_CLAMP, EXP_CLAMP)).exp())
    }

    fn phi_prime(&self, alpha: f64) -> f64 {
        let p = self.phi(alpha);
        self.c * p * (1.0 - p)
    }

    pub fn value(&self, alpha: f64) -> f64 {
        alpha * self.phi(alpha) - (alpha - 1.0) * self.phi(alpha - 1.0)
    }

    pub fn derivative(&self, alpha: f64) -> f64 {
        let a1 = alpha - 1.0;
        self.phi(alpha) + alpha * self.phi_prime(alpha) - self.phi(a1) - a1 * self.phi_prime(a1)
    }
}

impl Default for SmoothProjection {
    fn default() -> Self {
        Self { c: 20.0 }
    }
}

pub fn smooth_project(alpha: f64, proj: SmoothProjection) -> f64 {
    proj.value(alpha)
}

/// Table plane `z = table_height`, normal `+z`, with an extra clearance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticEnvironment {
    pub table_height: f64,
    pub clearance: f64,
}

impl StaticEnvironment {
    pub fn new(table_height: f64, clearance: f64) -> Result<Self> {
        if !(table_height.is_finite() && table_height >= 0.0 && clearance.is_finite() && clearance >= 0.0) {
            return Err(Error::InvalidScenario(format!(
                "table height {table_height} and clearance {clearance} must be non-negative"
            )));
        }
        Ok(Self { table_height, clearance })
    }

    pub fn floor(&self) -> f64 {
        self.table_height + self.clearance
    }
}

impl Default for StaticEnvironment {
    fn default() -> Self {
        Self { table_height: 1.107, clearance: 0.02 }
    }
}

fn alpha_terms(d: &Vector3<f64>, r: &Vector3<f64>, m: &Matrix3<f64>) -> (f64, f64, Vector3<f64>) {
    let mr = m * r;
    let den = r.dot(&mr);
    (-d.dot(&mr) / den, den, mr)
}

/// Unconstrained minimiser of `H(b + α r)` over the whole line.
pub fn unconstrained_alpha(seg: &LineSegment, ell: &Ellipsoid) -> f64 {
    let m = ell.shape_matrix();
    alpha_terms(&(seg.base - ell.center), &seg.direction, &m).0
}

/// `H(s(α*)) − 1` with the smoothly projected parameter; `≥ 0` means separated.
pub fn els_margin(seg: &LineSegment, ell: &Ellipsoid, proj: SmoothProjection) -> f64 {
    let m = ell.shape_matrix();
    let d = seg.base - ell.center;
    let (alpha, _, _) = alpha_terms(&d, &seg.direction, &m);
    let w = d + proj.value(alpha) * seg.direction;
    w.dot(&(m * w)) - 1.0
}

/// Margin with the exact clamp in place of the smooth projection; the true
/// minimum of `H − 1` over the closed segment.
pub fn els_margin_exact(seg: &LineSegment, ell: &Ellipsoid) -> f64 {
    let m = ell.shape_matrix();
    let d = seg.base - ell.center;
    let (alpha, _, _) = alpha_terms(&d, &seg.direction, &m);
    let w = d + alpha.clamp(0.0, 1.0) * seg.direction;
    w.dot(&(m * w)) - 1.0
}

/// Margin and its partial derivatives with respect to the primitive data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElsGradient {
    pub value: f64,
    pub d_base: Vector3<f64>,
    pub d_direction: Vector3<f64>,
    pub d_center: Vector3<f64>,
    /// `G` such that `dg = ⟨G, dM⟩` for the shape matrix `M = R E Rᵀ`.
    pub d_shape: Matrix3<f64>,
}

pub fn els_margin_gradient(
    seg: &LineSegment,
    center: &Vector3<f64>,
    shape: &Matrix3<f64>,
    proj: SmoothProjection,
) -> ElsGradient {
    let d = seg.base - center;
    let r = seg.direction;
    let (alpha, den, mr) = alpha_terms(&d, &r, shape);
    let a_star = proj.value(alpha);
    let w = d + a_star * r;
    let mw = shape * w;
    let s = 2.0 * mw.dot(&r) * proj.derivative(alpha) / den;
    let md = shape * d;
    let d_d = 2.0 * mw - s * mr;
    let d_r = 2.0 * a_star * mw - s * (md + 2.0 * alpha * mr);
    let d_shape = w * w.transpose() - s * (d * r.transpose() + alpha * r * r.transpose());
    ElsGradient {
        value: w.dot(&mw) - 1.0,
        d_base: d_d,
        d_direction: d_r,
        d_center: -d_d,
        d_shape,
    }
}

/// Accumulates `∂g/∂q` of the segment robot given `∂g/∂b` and `∂g/∂r`.
pub fn chain_segment_gradient(
    pose: &ChainPose,
    spec: &SegmentSpec,
    d_base: &Vector3<f64>,
    d_direction: &Vector3<f64>,
    out: &mut [f64],
) {
    // b = p_start, r = p_end − p_start
    let start = pose.point(&spec.start);
    let end = pose.point(&spec.end);
    let g_start = d_base - d_direction;
    for (j, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        if j < pose.joints_moving(spec.start.frame) {
            let (axis, pivot) = pose.joint_axis(j);
            acc += g_start.dot(&axis.cross(&(start - pivot)));
        }
        if j < pose.joints_moving(spec.end.frame) {
            let (axis, pivot) = pose.joint_axis(j);
            acc += d_direction.dot(&axis.cross(&(end - pivot)));
        }
        *o += acc;
    }
}

/// Accumulates `∂g/∂q` of the ellipsoid robot given `∂g/∂e0` and `∂g/∂M`.
pub fn chain_ellipsoid_gradient(
    pose: &ChainPose,
    spec: &EllipsoidSpec,
    shape: &Matrix3<f64>,
    d_center: &Vector3<f64>,
    d_shape: &Matrix3<f64>,
    out: &mut [f64],
) {
    let start = pose.point(&spec.start);
    let end = pose.point(&spec.end);
    let half = 0.5 * d_center;
    for (j, o) in out.iter_mut().enumerate() {
        let (axis, pivot) = pose.joint_axis(j.min(pose.dof() - 1));
        let mut acc = 0.0;
        if j < pose.joints_moving(spec.start.frame) {
            acc += half.dot(&axis.cross(&(start - pivot)));
        }
        if j < pose.joints_moving(spec.end.frame) {
            acc += half.dot(&axis.cross(&(end - pivot)));
        }
        if j < pose.joints_moving(spec.rotation_frame) {
            let s = axis.cross_matrix();
            let dm = s * shape - shape * s;
            acc += d_shape.component_mul(&dm).sum();
        }
        *o += acc;
    }
}

/// Margin between segment `seg` of one robot and ellipsoid `ell` of another,
/// with gradients with respect to both joint vectors.
pub fn els_margin_joint_gradient(
    seg_model: &ManipulatorModel,
    q_seg: &[f64],
    seg: usize,
    ell_model: &ManipulatorModel,
    q_ell: &[f64],
    ell: usize,
    proj: SmoothProjection,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let seg_pose = ChainPose::new(seg_model, q_seg)?;
    let ell_pose = ChainPose::new(ell_model, q_ell)?;
    let seg_spec = seg_model
        .segments
        .get(seg)
        .ok_or_else(|| Error::Dimension(format!("segment index {seg} out of range")))?;
    let ell_spec = ell_model
        .ellipsoids
        .get(ell)
        .ok_or_else(|| Error::Dimension(format!("ellipsoid index {ell} out of range")))?;
    let line = seg_pose.segment(seg_spec);
    let ellipsoid = ell_pose.ellipsoid(ell_spec);
    let shape = ellipsoid.shape_matrix();
    let g = els_margin_gradient(&line, &ellipsoid.center, &shape, proj);
    let mut grad_seg = vec![0.0; seg_model.dof()];
    let mut grad_ell = vec![0.0; ell_model.dof()];
    chain_segment_gradient(&seg_pose, seg_spec, &g.d_base, &g.d_direction, &mut grad_seg);
    chain_ellipsoid_gradient(&ell_pose, ell_spec, &shape, &g.d_center, &g.d_shape, &mut grad_ell);
    Ok((g.value, grad_seg, grad_ell))
}

/// Heights above the table floor: one entry per segment base, then one for the
/// wrist flange lowered by the gripper length, which bounds the gripper tip
/// from below for any orientation. Non-negative means clear.
pub fn static_margins(model: &ManipulatorModel, q: &[f64], env: &StaticEnvironment) -> Result<Vec<f64>> {
    let pose = ChainPose::new(model, q)?;
    let floor = env.floor();
    let mut out: Vec<f64> = model.segments.iter().map(|s| pose.point(&s.start).z - floor).collect();
    out.push(pose.frames()[model.dof()].origin.z - model.gripper_offset - floor);
    Ok(out)
}

/// Minimum Euclidean distance between two closed segments.
pub fn segment_segment_distance(a: &LineSegment, b: &LineSegment) -> f64 {
    let (s, t) = closest_parameters(a, b);
    (a.point_at(s) - b.point_at(t)).norm()
}

/// Parameters of a closest pair of points, clamped closest-point algorithm.
pub fn closest_parameters(a: &LineSegment, b: &LineSegment) -> (f64, f64) {
    const EPS: f64 = 1e-14;
    let d1 = a.direction;
    let d2 = b.direction;
    let r = a.base - b.base;
    let aa = d1.dot(&d1);
    let ee = d2.dot(&d2);
    let f = d2.dot(&r);
    if aa <= EPS && ee <= EPS {
        return (0.0, 0.0);
    }
    if aa <= EPS {
        return (0.0, (f / ee).clamp(0.0, 1.0));
    }
    let c = d1.dot(&r);
    if ee <= EPS {
        return ((-c / aa).clamp(0.0, 1.0), 0.0);
    }
    let bb = d1.dot(&d2);
    let denom = aa * ee - bb * bb;
    let mut s = if denom > EPS * aa * ee { ((bb * f - c * ee) / denom).clamp(0.0, 1.0) } else { 0.0 };
    let mut t = (bb * s + f) / ee;
    if t < 0.0 {
        t = 0.0;
        s = (-c / aa).clamp(0.0, 1.0);
    } else if t > 1.0 {
        t = 1.0;
        s = ((bb - c) / aa).clamp(0.0, 1.0);
    }
    (s, t)
}

/// Minimum distance between any link segments of two robots.
pub fn min_link_distance(a: &[LineSegment], b: &[LineSegment]) -> f64 {
    a.iter()
        .flat_map(|sa| b.iter().map(move |sb| segment_segment_distance(sa, sb)))
        .fold(f64::INFINITY, f64::min)
}

/// One constraint family: segment `segment` of the owning robot against
/// ellipsoid `ellipsoid` of robot `other`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CollisionPair {
    pub other: usize,
    pub ellipsoid: usize,
    pub segment: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CollisionPairSet {
    pub pairs: Vec<CollisionPair>,
}

impl CollisionPairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn neighbors(&self) -> BTreeSet<usize> {
        self.pairs.iter().map(|p| p.other).collect()
    }

    pub fn count_for(&self, other: usize) -> usize {
        self.pairs.iter().filter(|p| p.other == other).count()
    }
}

/// Which ellipsoid/segment combinations can touch, by link name.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningEntry {
    /// Restricts the entry to this robot's segments; all robots when absent.
    #[serde(default)]
    pub segment_robot: Option<usize>,
    /// Restricts the entry to this robot's ellipsoids; all robots when absent.
    #[serde(default)]
    pub ellipsoid_robot: Option<usize>,
    pub ellipsoid: String,
    pub segment: String,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningTable {
    #[serde(default, rename = "pair")]
    pub entries: Vec<PruningEntry>,
}

impl PruningTable {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidPruning(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })
    }

    fn allows(&self, seg_robot: usize, seg: &str, ell_robot: usize, ell: &str) -> bool {
        self.entries.iter().any(|e| {
            e.segment_robot.is_none_or(|r| r == seg_robot)
                && e.ellipsoid_robot.is_none_or(|r| r == ell_robot)
                && e.ellipsoid == ell
                && e.segment == seg
        })
    }
}

/// Pair sets for every robot. Neighbours whose reach spheres are disjoint get
/// no pairs; otherwise the pruning table (or the full cross product when none
/// is given) decides which combinations are kept.
pub fn build_pair_set(models: &[ManipulatorModel], pruning: Option<&PruningTable>) -> Result<Vec<CollisionPairSet>> {
    if let Some(table) = pruning {
        for e in &table.entries {
            for (what, robot) in [("segment_robot", e.segment_robot), ("ellipsoid_robot", e.ellipsoid_robot)] {
                if robot.is_some_and(|r| r >= models.len()) {
                    return Err(Error::InvalidPruning(format!("{what} {} out of range", robot.unwrap_or(0))));
                }
            }
            let seg_models: Vec<&ManipulatorModel> = match e.segment_robot {
                Some(r) => vec![&models[r]],
                None => models.iter().collect(),
            };
            let ell_models: Vec<&ManipulatorModel> = match e.ellipsoid_robot {
                Some(r) => vec![&models[r]],
                None => models.iter().collect(),
            };
            if !seg_models.iter().any(|m| m.segment_index(&e.segment).is_some()) {
                return Err(Error::InvalidPruning(format!("unknown segment link name {:?}", e.segment)));
            }
            if !ell_models.iter().any(|m| m.ellipsoid_index(&e.ellipsoid).is_some()) {
                return Err(Error::InvalidPruning(format!("unknown ellipsoid link name {:?}", e.ellipsoid)));
            }
        }
    }
    let mut sets = Vec::with_capacity(models.len());
    for (i, mi) in models.iter().enumerate() {
        let mut pairs = Vec::new();
        for (j, mj) in models.iter().enumerate() {
            if i == j {
                continue;
            }
            let gap = (mi.base_pose.position - mj.base_pose.position).norm();
            if gap > mi.reach_radius() + mj.reach_radius() {
                continue;
            }
            for (n, ell) in mj.ellipsoids.iter().enumerate() {
                for (m, seg) in mi.segments.iter().enumerate() {
                    if pruning.is_none_or(|t| t.allows(i, &seg.name, j, &ell.name)) {
                        pairs.push(CollisionPair { other: j, ellipsoid: n, segment: m });
                    }
                }
            }
        }
        sets.push(CollisionPairSet { pairs });
    }
    Ok(sets)
}
