//! Serial-chain forward kinematics.
//!
//! Chains use the standard (distal) Denavit–Hartenberg convention: joint `i`
//! contributes `Rz(q_i + theta_offset) · Tz(d) · Tx(a) · Rx(alpha)`. Frame 0 is
//! the robot base placed at `base_pose`, frames `1..=N` follow the DH rows and
//! frame `N + 1` is the tool point, i.e. frame `N` translated by
//! `gripper_offset` along its z (approach) axis.
//!
//! Collision geometry is declared on top of the frames as pairs of
//! [`FramePoint`]s: a frame index plus an optional offset expressed in that
//! frame. Line segments run from the first point to the second; ellipsoids are
//! centred on their midpoint.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// One Denavit–Hartenberg row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DhRow {
    pub a: f64,
    pub alpha: f64,
    pub d: f64,
    pub theta_offset: f64,
}

impl DhRow {
    pub fn new(a: f64, alpha: f64, d: f64, theta_offset: f64) -> Self {
        Self { a, alpha, d, theta_offset }
    }

    /// Rotation and translation of `Rz(q + offset) Tz(d) Tx(a) Rx(alpha)`.
    pub fn transform(&self, q: f64) -> (Matrix3<f64>, Vector3<f64>) {
        let (st, ct) = (q + self.theta_offset).sin_cos();
        let (sa, ca) = self.alpha.sin_cos();
        let rotation = Matrix3::new(
            ct,
            -st * ca,
            st * sa,
            st,
            ct * ca,
            -ct * sa,
            0.0,
            sa,
            ca,
        );
        (rotation, Vector3::new(self.a * ct, self.a * st, self.d))
    }
}

/// Rigid transform: position plus rotation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self { position: Vector3::zeros(), rotation: Matrix3::identity() }
    }

    /// Pose at `position`, rotated by `yaw` about the world z axis.
    pub fn from_position_yaw(position: Vector3<f64>, yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        let rotation = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        Self { position, rotation }
    }

    pub fn translated(&self, t: Vector3<f64>) -> Self {
        Self { position: self.position + t, rotation: self.rotation }
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

/// A point rigidly attached to chain frame `frame`, `offset` in that frame's axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FramePoint {
    pub frame: usize,
    pub offset: Vector3<f64>,
}

impl FramePoint {
    pub fn origin(frame: usize) -> Self {
        Self { frame, offset: Vector3::zeros() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSpec {
    pub name: String,
    pub start: FramePoint,
    pub end: FramePoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EllipsoidSpec {
    pub name: String,
    pub start: FramePoint,
    pub end: FramePoint,
    /// Principal semi-axes (m) along the x, y, z axes of `rotation_frame`.
    pub semi_axes: Vector3<f64>,
    /// Frame whose orientation the ellipsoid follows; the link body frame.
    pub rotation_frame: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManipulatorModel {
    pub name: String,
    pub dh_rows: Vec<DhRow>,
    pub base_pose: Pose,
    pub joint_limits: Vec<(f64, f64)>,
    pub velocity_limits: Vec<f64>,
    pub acceleration_limits: Vec<f64>,
    pub segments: Vec<SegmentSpec>,
    pub ellipsoids: Vec<EllipsoidSpec>,
    pub neutral_pose: Vec<f64>,
    pub gripper_offset: f64,
    /// Radius of the physical links; ellipsoid minor semi-axes must be at least twice this.
    pub link_radius: f64,
}

impl ManipulatorModel {
    pub fn dof(&self) -> usize {
        self.dh_rows.len()
    }

    /// Index of the tool-point frame.
    pub fn tool_frame(&self) -> usize {
        self.dof() + 1
    }

    pub fn segment_index(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }

    pub fn ellipsoid_index(&self, name: &str) -> Option<usize> {
        self.ellipsoids.iter().position(|e| e.name == name)
    }

    pub fn with_base_pose(&self, base_pose: Pose) -> Self {
        Self { base_pose, ..self.clone() }
    }

    /// Upper bound on the distance from the base origin to any point of the
    /// collision geometry, over all configurations.
    pub fn reach_radius(&self) -> f64 {
        let chain: f64 = self.dh_rows.iter().map(|r| r.a.hypot(r.d)).sum();
        let offsets = self
            .segments
            .iter()
            .flat_map(|s| [s.start.offset.norm(), s.end.offset.norm()])
            .chain(self.ellipsoids.iter().flat_map(|e| [e.start.offset.norm(), e.end.offset.norm()]))
            .fold(0.0, f64::max);
        let axes = self.ellipsoids.iter().map(|e| e.semi_axes.max()).fold(0.0, f64::max);
        chain + self.gripper_offset + offsets + axes
    }

    /// Planar chain in the base xy plane: all `a_i = lengths[i]`, other DH
    /// entries zero. One segment and one ellipsoid per link, named `link{i}`.
    pub fn planar(lengths: &[f64]) -> Self {
        let n = lengths.len();
        let dh_rows = lengths.iter().map(|&a| DhRow::new(a, 0.0, 0.0, 0.0)).collect();
        let segments = (0..n)
            .map(|i| SegmentSpec {
                name: format!("link{}", i + 1),
                start: FramePoint::origin(i),
                end: FramePoint::origin(i + 1),
            })
            .collect();
        let ellipsoids = lengths
            .iter()
            .enumerate()
            .map(|(i, &a)| EllipsoidSpec {
                name: format!("link{}", i + 1),
                start: FramePoint::origin(i),
                end: FramePoint::origin(i + 1),
                semi_axes: Vector3::new(0.5 * a + 0.1, 0.1, 0.1),
                rotation_frame: i + 1,
            })
            .collect();
        Self {
            name: format!("planar{n}"),
            dh_rows,
            base_pose: Pose::identity(),
            joint_limits: vec![(-std::f64::consts::PI, std::f64::consts::PI); n],
            velocity_limits: vec![std::f64::consts::PI; n],
            acceleration_limits: vec![std::f64::consts::PI; n],
            segments,
            ellipsoids,
            neutral_pose: vec![0.0; n],
            gripper_offset: 0.0,
            link_radius: 0.05,
        }
    }

    /// Checks the type invariants; the error names the first violation.
    pub fn validate(&self) -> Result<()> {
        let n = self.dof();
        if n == 0 {
            return Err(Error::EmptyChain);
        }
        let bad = |msg: String| Err(Error::InvalidModel(format!("{}: {msg}", self.name)));
        for (what, len) in [
            ("joint_limits", self.joint_limits.len()),
            ("velocity_limits", self.velocity_limits.len()),
            ("acceleration_limits", self.acceleration_limits.len()),
            ("neutral_pose", self.neutral_pose.len()),
        ] {
            if len != n {
                return bad(format!("{what} has {len} entries, expected {n}"));
            }
        }
        for (j, row) in self.dh_rows.iter().enumerate() {
            if ![row.a, row.alpha, row.d, row.theta_offset].iter().all(|v| v.is_finite()) {
                return bad(format!("dh row {j} is not finite"));
            }
        }
        for (j, &(lo, hi)) in self.joint_limits.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return bad(format!("joint {} limits [{lo}, {hi}] are not an interval", j + 1));
            }
        }
        for (what, limits) in [
            ("velocity", &self.velocity_limits),
            ("acceleration", &self.acceleration_limits),
        ] {
            if let Some(j) = limits.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
                return bad(format!("joint {} {what} limit must be finite and positive", j + 1));
            }
        }
        if !(self.gripper_offset.is_finite() && self.gripper_offset >= 0.0) {
            return bad("gripper_offset must be non-negative".into());
        }
        if !(self.link_radius.is_finite() && self.link_radius >= 0.0) {
            return bad("link_radius must be non-negative".into());
        }
        let r = &self.base_pose.rotation;
        if (r.transpose() * r - Matrix3::identity()).abs().max() > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return bad("base rotation is not a proper rotation".into());
        }
        let max_frame = n + 1;
        let check_point = |what: &str, p: &FramePoint| -> Result<()> {
            if p.frame > max_frame {
                return Err(Error::InvalidModel(format!(
                    "{}: {what} references frame {} (valid 0..={max_frame})",
                    self.name, p.frame
                )));
            }
            if !p.offset.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidModel(format!("{}: {what} offset is not finite", self.name)));
            }
            Ok(())
        };
        for s in &self.segments {
            check_point(&format!("segment {}", s.name), &s.start)?;
            check_point(&format!("segment {}", s.name), &s.end)?;
        }
        for e in &self.ellipsoids {
            check_point(&format!("ellipsoid {}", e.name), &e.start)?;
            check_point(&format!("ellipsoid {}", e.name), &e.end)?;
            if e.rotation_frame > max_frame {
                return bad(format!("ellipsoid {} rotation frame {} out of range", e.name, e.rotation_frame));
            }
            if !e.semi_axes.iter().all(|l| l.is_finite() && *l > 0.0) {
                return bad(format!("ellipsoid {} semi-axes must be positive", e.name));
            }
            let mut axes = [e.semi_axes.x, e.semi_axes.y, e.semi_axes.z];
            axes.sort_by(f64::total_cmp);
            if axes[0] < 2.0 * self.link_radius || axes[1] < 2.0 * self.link_radius {
                return bad(format!(
                    "ellipsoid {} minor semi-axes {:.4}, {:.4} must be at least twice the link radius {:.4}",
                    e.name, axes[0], axes[1], self.link_radius
                ));
            }
        }
        let mut names = std::collections::BTreeSet::new();
        for s in &self.segments {
            if !names.insert(&s.name) {
                return bad(format!("duplicate segment name {}", s.name));
            }
        }
        names.clear();
        for e in &self.ellipsoids {
            if !names.insert(&e.name) {
                return bad(format!("duplicate ellipsoid name {}", e.name));
            }
        }
        line_segments(self, &self.neutral_pose)?;
        Ok(())
    }
}

/// World pose of one chain frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkFrame {
    pub origin: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

/// `s(alpha) = base + alpha * direction`, `alpha` in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSegment {
    pub base: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl LineSegment {
    pub fn new(base: Vector3<f64>, direction: Vector3<f64>) -> Self {
        Self { base, direction }
    }

    pub fn from_endpoints(start: Vector3<f64>, end: Vector3<f64>) -> Self {
        Self { base: start, direction: end - start }
    }

    pub fn point_at(&self, alpha: f64) -> Vector3<f64> {
        self.base + alpha * self.direction
    }

    pub fn end(&self) -> Vector3<f64> {
        self.base + self.direction
    }
}

/// `{e : (e - c)ᵀ R E Rᵀ (e - c) <= 1}` with `E = diag(1/l1², 1/l2², 1/l3²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: Vector3<f64>,
    pub rotation: Matrix3<f64>,
    /// Diagonal of `E`.
    pub inv_sq_semi_axes: Vector3<f64>,
}

impl Ellipsoid {
    pub fn new(center: Vector3<f64>, rotation: Matrix3<f64>, semi_axes: Vector3<f64>) -> Self {
        Self { center, rotation, inv_sq_semi_axes: semi_axes.map(|l| 1.0 / (l * l)) }
    }

    pub fn sphere(center: Vector3<f64>, radius: f64) -> Self {
        Self::new(center, Matrix3::identity(), Vector3::repeat(radius))
    }

    /// `R E Rᵀ`.
    pub fn shape_matrix(&self) -> Matrix3<f64> {
        self.rotation * Matrix3::from_diagonal(&self.inv_sq_semi_axes) * self.rotation.transpose()
    }

    /// Level-set value `H(e)`; 1 on the surface.
    pub fn level(&self, e: &Vector3<f64>) -> f64 {
        let d = e - self.center;
        d.dot(&(self.shape_matrix() * d))
    }
}

/// Frame poses of a chain at one configuration, with the derivative helpers
/// used by the optimizer.
#[derive(Debug, Clone)]
pub struct ChainPose {
    frames: Vec<LinkFrame>,
}

impl ChainPose {
    pub fn new(model: &ManipulatorModel, q: &[f64]) -> Result<Self> {
        let n = model.dof();
        if n == 0 {
            return Err(Error::EmptyChain);
        }
        if q.len() != n {
            return Err(Error::Dimension(format!("q has {} entries, chain has {n} joints", q.len())));
        }
        let mut frames = Vec::with_capacity(n + 2);
        let mut rotation = model.base_pose.rotation;
        let mut origin = model.base_pose.position;
        frames.push(LinkFrame { origin, rotation });
        for (row, &qi) in model.dh_rows.iter().zip(q) {
            let (r, p) = row.transform(qi);
            origin += rotation * p;
            rotation *= r;
            frames.push(LinkFrame { origin, rotation });
        }
        let tool = origin + rotation.column(2) * model.gripper_offset;
        frames.push(LinkFrame { origin: tool, rotation });
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[LinkFrame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<LinkFrame> {
        self.frames
    }

    pub fn dof(&self) -> usize {
        self.frames.len() - 2
    }

    pub fn point(&self, p: &FramePoint) -> Vector3<f64> {
        let f = &self.frames[p.frame];
        f.origin + f.rotation * p.offset
    }

    /// World axis and pivot of joint `j` (0-based): z axis and origin of frame `j`.
    pub fn joint_axis(&self, j: usize) -> (Vector3<f64>, Vector3<f64>) {
        let f = &self.frames[j];
        (f.rotation.column(2).into_owned(), f.origin)
    }

    /// Number of joints that move frame `frame`.
    pub fn joints_moving(&self, frame: usize) -> usize {
        frame.min(self.dof())
    }

    /// Writes `∂p/∂q_j` for a world point `p` rigidly attached to `frame`.
    pub fn point_jacobian(&self, frame: usize, p: &Vector3<f64>, out: &mut [Vector3<f64>]) {
        let moving = self.joints_moving(frame);
        for (j, col) in out.iter_mut().enumerate() {
            *col = if j < moving {
                let (axis, pivot) = self.joint_axis(j);
                axis.cross(&(p - pivot))
            } else {
                Vector3::zeros()
            };
        }
    }

    /// `∂R_frame/∂q_j = [z_j]× R_frame` for moving joints, zero otherwise.
    pub fn rotation_derivative(&self, frame: usize, j: usize) -> Matrix3<f64> {
        if j < self.joints_moving(frame) {
            let (axis, _) = self.joint_axis(j);
            axis.cross_matrix() * self.frames[frame].rotation
        } else {
            Matrix3::zeros()
        }
    }

    pub fn segment(&self, spec: &SegmentSpec) -> LineSegment {
        LineSegment::from_endpoints(self.point(&spec.start), self.point(&spec.end))
    }

    pub fn ellipsoid(&self, spec: &EllipsoidSpec) -> Ellipsoid {
        let center = 0.5 * (self.point(&spec.start) + self.point(&spec.end));
        Ellipsoid::new(center, self.frames[spec.rotation_frame].rotation, spec.semi_axes)
    }
}

/// Base, joint frames and tool point (`N + 2` frames).
pub fn forward_kinematics(model: &ManipulatorModel, q: &[f64]) -> Result<Vec<LinkFrame>> {
    Ok(ChainPose::new(model, q)?.into_frames())
}

pub fn line_segments(model: &ManipulatorModel, q: &[f64]) -> Result<Vec<LineSegment>> {
    let pose = ChainPose::new(model, q)?;
    model
        .segments
        .iter()
        .enumerate()
        .map(|(index, spec)| {
            let seg = pose.segment(spec);
            if seg.direction.norm() <= 1e-12 {
                Err(Error::ZeroLengthSegment { index })
            } else {
                Ok(seg)
            }
        })
        .collect()
}

pub fn ellipsoids(model: &ManipulatorModel, q: &[f64]) -> Result<Vec<Ellipsoid>> {
    let pose = ChainPose::new(model, q)?;
    Ok(model.ellipsoids.iter().map(|spec| pose.ellipsoid(spec)).collect())
}

/// Derivatives of every frame origin and rotation, indexed `[frame][joint]`.
#[derive(Debug, Clone)]
pub struct FrameJacobians {
    pub origin: Vec<Vec<Vector3<f64>>>,
    pub rotation: Vec<Vec<Matrix3<f64>>>,
}

pub fn fk_jacobians(model: &ManipulatorModel, q: &[f64]) -> Result<FrameJacobians> {
    let pose = ChainPose::new(model, q)?;
    let n = pose.dof();
    let mut origin = Vec::with_capacity(n + 2);
    let mut rotation = Vec::with_capacity(n + 2);
    for (f, frame) in pose.frames().iter().enumerate() {
        let mut cols = vec![Vector3::zeros(); n];
        pose.point_jacobian(f, &frame.origin, &mut cols);
        origin.push(cols);
        rotation.push((0..n).map(|j| pose.rotation_derivative(f, j)).collect());
    }
    Ok(FrameJacobians { origin, rotation })
}
