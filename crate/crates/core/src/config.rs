//! Manipulator model files.
//!
//! A model file lists one `[[joint]]` table per DH row (with its position,
//! velocity and acceleration limits) followed by the `[[segment]]` and
//! `[[ellipsoid]]` collision geometry. Frame points are written as
//! `{ frame = 2, offset = [0.0, 0.0, 0.1] }`; the offset may be omitted.

use std::path::Path;

use nalgebra::Vector3;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::kinematics::{DhRow, EllipsoidSpec, FramePoint, ManipulatorModel, Pose, SegmentSpec};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct PointFile {
    frame: usize,
    #[serde(default)]
    offset: [f64; 3],
}

impl From<&PointFile> for FramePoint {
    fn from(p: &PointFile) -> Self {
        FramePoint { frame: p.frame, offset: Vector3::from(p.offset) }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointFile {
    a: f64,
    alpha: f64,
    d: f64,
    #[serde(default)]
    theta_offset: f64,
    q_min: f64,
    q_max: f64,
    qd_max: f64,
    qdd_max: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentFile {
    name: String,
    start: PointFile,
    end: PointFile,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct EllipsoidFile {
    name: String,
    start: PointFile,
    end: PointFile,
    semi_axes: [f64; 3],
    rotation_frame: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    name: String,
    #[serde(default)]
    gripper_offset: f64,
    #[serde(default)]
    link_radius: f64,
    neutral_pose: Vec<f64>,
    joint: Vec<JointFile>,
    #[serde(default)]
    segment: Vec<SegmentFile>,
    #[serde(default)]
    ellipsoid: Vec<EllipsoidFile>,
}

/// Parses and validates a model; `origin` names the source in errors.
pub fn parse_model(text: &str, origin: &str) -> Result<ManipulatorModel> {
    let file: ModelFile =
        toml::from_str(text).map_err(|e| Error::Parse { path: origin.into(), message: e.to_string() })?;
    let model = ManipulatorModel {
        name: file.name,
        dh_rows: file.joint.iter().map(|j| DhRow::new(j.a, j.alpha, j.d, j.theta_offset)).collect(),
        base_pose: Pose::identity(),
        joint_limits: file.joint.iter().map(|j| (j.q_min, j.q_max)).collect(),
        velocity_limits: file.joint.iter().map(|j| j.qd_max).collect(),
        acceleration_limits: file.joint.iter().map(|j| j.qdd_max).collect(),
        segments: file
            .segment
            .iter()
            .map(|s| SegmentSpec { name: s.name.clone(), start: (&s.start).into(), end: (&s.end).into() })
            .collect(),
        ellipsoids: file
            .ellipsoid
            .iter()
            .map(|e| EllipsoidSpec {
                name: e.name.clone(),
                start: (&e.start).into(),
                end: (&e.end).into(),
                semi_axes: Vector3::from(e.semi_axes),
                rotation_frame: e.rotation_frame,
            })
            .collect(),
        neutral_pose: file.neutral_pose,
        gripper_offset: file.gripper_offset,
        link_radius: file.link_radius,
    };
    model.validate()?;
    Ok(model)
}

pub fn load_model(path: &Path) -> Result<ManipulatorModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_model(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_LINK: &str = r#"
name = "two_link"
neutral_pose = [0.0, 0.0]
link_radius = 0.02

[[joint]]
a = 1.0
alpha = 0.0
d = 0.0
q_min = -3.0
q_max = 3.0
qd_max = 3.14
qdd_max = 3.14

[[joint]]
a = 1.0
alpha = 0.0
d = 0.0
q_min = -3.0
q_max = 3.0
qd_max = 3.14
qdd_max = 3.14

[[segment]]
name = "upper"
start = { frame = 0 }
end = { frame = 1 }

[[ellipsoid]]
name = "upper"
start = { frame = 0 }
end = { frame = 1, offset = [0.0, 0.0, 0.0] }
semi_axes = [0.6, 0.1, 0.1]
rotation_frame = 1
"#;

    #[test]
    fn parses_a_two_link_model() {
        let m = parse_model(TWO_LINK, "inline").unwrap();
        assert_eq!(m.dof(), 2);
        assert_eq!(m.segments.len(), 1);
        assert_eq!(m.ellipsoids[0].semi_axes, Vector3::new(0.6, 0.1, 0.1));
        assert_eq!(m.joint_limits[1], (-3.0, 3.0));
    }

    #[test]
    fn invalid_models_are_rejected_with_origin() {
        let err = parse_model("name = 3", "broken.toml").unwrap_err().to_string();
        assert!(err.contains("broken.toml"), "{err}");
        let thin = TWO_LINK.replace("[0.6, 0.1, 0.1]", "[0.6, 0.01, 0.1]");
        let err = parse_model(&thin, "inline").unwrap_err().to_string();
        assert!(err.contains("twice the link radius"), "{err}");
    }

    #[test]
    fn shipped_models_load() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/models");
        for name in ["ur3_like.toml", "ur3_like_full.toml"] {
            let m = load_model(&dir.join(name)).unwrap();
            assert_eq!(m.dof(), 6);
        }
    }
}
