//! Python bindings: scenarios, simulation runs, collision geometry and the wire format.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use mdmpc::collision::{els_margin, els_margin_exact, SmoothProjection};
use mdmpc::comms::{decode, encode, Message, TrajectoryMessage};
use mdmpc::config::load_model;
use mdmpc::dynamics::discretize;
use mdmpc::kinematics::{forward_kinematics, line_segments, Ellipsoid, LineSegment, ManipulatorModel, Pose};
use mdmpc::sim::{self, GenRequest, ScenarioConfig, SimLog, TransportKind};
use nalgebra::{Matrix3, Vector3};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json<'py>(py: Python<'py>, value: &sim::Metrics) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn matrix_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// A resolved scenario: robots, tasks, horizon and controller settings.
#[pyclass(name = "Scenario", module = "mdmpc", from_py_object)]
#[derive(Clone)]
struct PyScenario {
    inner: ScenarioConfig,
}

#[pymethods]
impl PyScenario {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: ScenarioConfig::load(&path).map_err(err)? })
    }

    /// Parses TOML text; relative model paths are resolved against `base_dir`.
    #[staticmethod]
    #[pyo3(signature = (text, base_dir = "."))]
    fn from_toml(text: &str, base_dir: &str) -> PyResult<Self> {
        Ok(Self { inner: ScenarioConfig::from_toml_str(text, Path::new(base_dir), "<string>").map_err(err)? })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn robot_count(&self) -> usize {
        self.inner.robots.len()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon
    }

    #[setter]
    fn set_horizon(&mut self, horizon: usize) {
        self.inner.horizon = horizon;
    }

    #[getter]
    fn ts(&self) -> f64 {
        self.inner.ts
    }

    #[getter]
    fn step_budget(&self) -> u64 {
        self.inner.step_budget
    }

    #[setter]
    fn set_step_budget(&mut self, budget: u64) {
        self.inner.step_budget = budget;
    }

    #[getter]
    fn transport(&self) -> &'static str {
        match self.inner.transport {
            TransportKind::Inproc => "inproc",
            TransportKind::Udp => "udp",
        }
    }

    #[setter]
    fn set_transport(&mut self, transport: &str) -> PyResult<()> {
        self.inner.transport = transport.parse().map_err(err)?;
        Ok(())
    }

    /// Task targets of one robot as joint positions.
    fn targets(&self, robot: usize) -> PyResult<Vec<Vec<f64>>> {
        let r = self.inner.robots.get(robot).ok_or_else(|| err(format!("no robot {robot}")))?;
        Ok(r.tasks.iter().map(|t| t.target.q.as_slice().to_vec()).collect())
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    fn subset(&self, keep: Vec<usize>) -> PyResult<Self> {
        Ok(Self { inner: self.inner.subset(&keep).map_err(err)? })
    }

    fn with_robot_count(&self, count: usize) -> PyResult<Self> {
        Ok(Self { inner: self.inner.with_robot_count(count).map_err(err)? })
    }

    fn __repr__(&self) -> String {
        format!("Scenario({:?}, robots={}, horizon={})", self.inner.name, self.inner.robots.len(), self.inner.horizon)
    }
}

/// The log of one simulation run.
#[pyclass(name = "SimResult", module = "mdmpc", frozen)]
struct PySimResult {
    log: SimLog,
}

#[pymethods]
impl PySimResult {
    #[getter]
    fn steps(&self) -> usize {
        self.log.steps.len()
    }

    #[getter]
    fn execution_steps(&self) -> Option<u64> {
        self.log.execution_steps
    }

    #[getter]
    fn all_completed(&self) -> bool {
        self.log.all_completed()
    }

    #[getter]
    fn safety_stop(&self) -> bool {
        self.log.safety_stop
    }

    fn completed(&self) -> Vec<bool> {
        self.log.completed()
    }

    /// Joint positions of one robot, one row per step plus the final state.
    fn positions(&self, robot: usize) -> PyResult<Vec<Vec<f64>>> {
        if robot >= self.log.robot_count() {
            return Err(err(format!("no robot {robot}")));
        }
        Ok(self.log.positions(robot))
    }

    /// Minimum ELS margin at each sampling instant.
    fn min_els_margins(&self) -> Vec<f64> {
        self.log.steps.iter().map(|s| s.min_els_margin).collect()
    }

    /// Solve times of one robot in milliseconds; `None` where it held without solving.
    fn solve_times_ms(&self, robot: usize) -> Vec<Option<f64>> {
        self.log.steps.iter().map(|s| s.robots[robot].solve_time.map(|d| d.as_secs_f64() * 1e3)).collect()
    }

    /// Deadlock groups as `(step, members, leader)`.
    fn deadlocks(&self) -> Vec<(u64, Vec<usize>, usize)> {
        self.log.deadlocks.iter().map(|d| (d.step, d.members.clone(), d.leader)).collect()
    }

    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json(py, &sim::metrics(&self.log).map_err(err)?)
    }

    fn to_csv(&self) -> String {
        self.log.to_csv()
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        self.log.write_csv(&path).map_err(err)
    }
}

/// A manipulator model, optionally placed at a base pose.
#[pyclass(name = "Model", module = "mdmpc", frozen)]
struct PyModel {
    inner: Arc<ManipulatorModel>,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (path, base = [0.0, 0.0, 0.0], yaw = 0.0))]
    fn load(path: PathBuf, base: [f64; 3], yaw: f64) -> PyResult<Self> {
        let m = load_model(&path).map_err(err)?;
        Ok(Self { inner: Arc::new(m.with_base_pose(Pose::from_position_yaw(Vector3::from(base), yaw))) })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn dof(&self) -> usize {
        self.inner.dof()
    }

    #[getter]
    fn joint_limits(&self) -> Vec<(f64, f64)> {
        self.inner.joint_limits.clone()
    }

    #[getter]
    fn neutral_pose(&self) -> Vec<f64> {
        self.inner.neutral_pose.clone()
    }

    /// World positions of the frame origins, base first.
    fn frame_origins(&self, q: Vec<f64>) -> PyResult<Vec<[f64; 3]>> {
        let frames = forward_kinematics(&self.inner, &q).map_err(err)?;
        Ok(frames.iter().map(|f| [f.origin.x, f.origin.y, f.origin.z]).collect())
    }

    /// Collision segments as `(start, end)` pairs.
    fn segments(&self, q: Vec<f64>) -> PyResult<Vec<([f64; 3], [f64; 3])>> {
        let segs = line_segments(&self.inner, &q).map_err(err)?;
        Ok(segs.iter().map(|s| (s.base.into(), s.end().into())).collect())
    }

    /// Joint positions placing the tool point at `point`.
    fn inverse_kinematics(&self, point: [f64; 3]) -> PyResult<Vec<f64>> {
        sim::joint_target(&self.inner, &Vector3::from(point)).map_err(err)
    }
}

/// Distributed game controller over the whole scenario.
#[pyfunction]
fn run(py: Python<'_>, scenario: &PyScenario) -> PyResult<PySimResult> {
    let sc = scenario.inner.clone();
    let log = py.detach(move || sim::run(&sc)).map_err(err)?;
    Ok(PySimResult { log })
}

/// Centralised baseline: one joint problem per step.
#[pyfunction]
fn run_centralized(py: Python<'_>, scenario: &PyScenario) -> PyResult<PySimResult> {
    let sc = scenario.inner.clone();
    let log = py.detach(move || sim::run_centralized(&sc)).map_err(err)?;
    Ok(PySimResult { log })
}

/// Clearance evaluated between samples on the exact hold trajectory.
#[pyfunction]
#[pyo3(signature = (result, scenario, substeps = 10))]
fn audit_clearance<'py>(
    py: Python<'py>,
    result: &PySimResult,
    scenario: &PyScenario,
    substeps: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let a = sim::audit_clearance(&result.log, &scenario.inner, substeps).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("substeps", a.substeps)?;
    d.set_item("min_margin", a.min_margin)?;
    d.set_item("sampled_min_margin", a.sampled_min_margin)?;
    d.set_item("min_link_distance", a.min_link_distance)?;
    Ok(d)
}

#[pyfunction]
fn rms_deviation(a: &PySimResult, b: &PySimResult) -> PyResult<f64> {
    sim::rms_deviation(&a.log, &b.log).map_err(err)
}

fn ellipsoid(center: [f64; 3], rotation: [[f64; 3]; 3], semi_axes: [f64; 3]) -> Ellipsoid {
    let r = Matrix3::from_fn(|i, j| rotation[i][j]);
    Ellipsoid::new(Vector3::from(center), r, Vector3::from(semi_axes))
}

/// `H − 1` at the smoothly projected closest segment parameter.
#[pyfunction]
#[pyo3(signature = (base, direction, center, rotation, semi_axes, c = 20.0))]
fn els(
    base: [f64; 3],
    direction: [f64; 3],
    center: [f64; 3],
    rotation: [[f64; 3]; 3],
    semi_axes: [f64; 3],
    c: f64,
) -> PyResult<f64> {
    let seg = LineSegment::new(Vector3::from(base), Vector3::from(direction));
    Ok(els_margin(&seg, &ellipsoid(center, rotation, semi_axes), SmoothProjection::new(c).map_err(err)?))
}

/// `H − 1` minimised exactly over the closed segment.
#[pyfunction]
fn els_exact(
    base: [f64; 3],
    direction: [f64; 3],
    center: [f64; 3],
    rotation: [[f64; 3]; 3],
    semi_axes: [f64; 3],
) -> f64 {
    let seg = LineSegment::new(Vector3::from(base), Vector3::from(direction));
    els_margin_exact(&seg, &ellipsoid(center, rotation, semi_axes))
}

#[pyfunction]
#[pyo3(signature = (alpha, c = 20.0))]
fn smooth_project(alpha: f64, c: f64) -> PyResult<f64> {
    Ok(SmoothProjection::new(c).map_err(err)?.value(alpha))
}

/// Zero-order-hold matrices `(A_d, B_d)` of `n` double integrators.
#[pyfunction]
fn discretization(n: usize, ts: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = discretize(n, ts);
    (matrix_rows(&d.a_d), matrix_rows(&d.b_d))
}

#[pyfunction]
fn place_objects_rsa(
    region_min: [f64; 3],
    region_max: [f64; 3],
    count: usize,
    min_sep: f64,
    seed: u64,
) -> PyResult<Vec<[f64; 3]>> {
    let region = sim::Region::new(Vector3::from(region_min), Vector3::from(region_max)).map_err(err)?;
    let pts = sim::place_objects_rsa(&region, count, min_sep, seed).map_err(err)?;
    Ok(pts.iter().map(|p| [p.x, p.y, p.z]).collect())
}

/// Scenario TOML for a generated pick-and-place task.
#[pyfunction]
#[pyo3(signature = (robots, objects, seed, model_path, written_model_path = None, spacing = 0.7, min_separation = 0.08, horizon = 15))]
#[allow(clippy::too_many_arguments)]
fn generate_scenario(
    robots: usize,
    objects: usize,
    seed: u64,
    model_path: PathBuf,
    written_model_path: Option<String>,
    spacing: f64,
    min_separation: f64,
    horizon: usize,
) -> PyResult<String> {
    let req = GenRequest {
        robots,
        objects,
        seed,
        model_path: written_model_path.unwrap_or_else(|| model_path.to_string_lossy().into_owned()),
        model: load_model(&model_path).map_err(err)?,
        spacing,
        min_separation,
        horizon,
        ts: 0.2,
        step_budget: 600,
    };
    let file = sim::generate_scenario(&req).map_err(err)?;
    toml::to_string(&file).map_err(err)
}

/// Trajectory frame of `states`, each a stacked `[q, q̇]`.
#[pyfunction]
fn encode_trajectory<'py>(
    py: Python<'py>,
    robot_id: u16,
    step_index: u64,
    states: Vec<Vec<f64>>,
) -> PyResult<Bound<'py, PyBytes>> {
    let width = states.first().map_or(0, Vec::len);
    if !width.is_multiple_of(2) || states.len() < 2 || states.iter().any(|s| s.len() != width) {
        return Err(err("states must be at least two rows of equal, even length"));
    }
    let msg = Message::Trajectory(TrajectoryMessage {
        robot_id,
        step_index,
        n: u8::try_from(width / 2).map_err(err)?,
        np: u16::try_from(states.len() - 1).map_err(err)?,
        states: states.concat(),
    });
    Ok(PyBytes::new(py, &encode(&msg).map_err(err)?))
}

/// Decodes any frame into a dict with a `type` key.
#[pyfunction]
fn decode_frame<'py>(py: Python<'py>, frame: &[u8]) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    match decode(frame).map_err(err)? {
        Message::Trajectory(t) => {
            d.set_item("type", "trajectory")?;
            d.set_item("robot_id", t.robot_id)?;
            d.set_item("step_index", t.step_index)?;
            let width = 2 * t.n as usize;
            let rows: Vec<Vec<f64>> = t.states.chunks(width.max(1)).map(<[f64]>::to_vec).collect();
            d.set_item("states", rows)?;
        }
        Message::Report(r) => {
            d.set_item("type", "report")?;
            d.set_item("robot_id", r.robot_id)?;
            d.set_item("step_index", r.step_index)?;
            d.set_item("gamma_d", r.gamma_d)?;
            d.set_item("x_s", r.x_s)?;
            d.set_item("x_f", r.x_f)?;
        }
        Message::Command(c) => {
            d.set_item("type", "command")?;
            d.set_item("robot_id", c.robot_id)?;
            d.set_item("step_index", c.step_index)?;
            d.set_item("gamma_r", c.gamma_r)?;
            d.set_item("override_target", c.override_target)?;
        }
    }
    Ok(d)
}

#[pymodule]
#[pyo3(name = "mdmpc")]
pub fn mdmpc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PySimResult>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(run_centralized, m)?)?;
    m.add_function(wrap_pyfunction!(audit_clearance, m)?)?;
    m.add_function(wrap_pyfunction!(rms_deviation, m)?)?;
    m.add_function(wrap_pyfunction!(els, m)?)?;
    m.add_function(wrap_pyfunction!(els_exact, m)?)?;
    m.add_function(wrap_pyfunction!(smooth_project, m)?)?;
    m.add_function(wrap_pyfunction!(discretization, m)?)?;
    m.add_function(wrap_pyfunction!(place_objects_rsa, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(encode_trajectory, m)?)?;
    m.add_function(wrap_pyfunction!(decode_frame, m)?)?;
    Ok(())
}
