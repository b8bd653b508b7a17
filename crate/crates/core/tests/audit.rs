mod common;

use mdmpc::dynamics::ControlInput;
use mdmpc::sim::{audit_clearance, open_loop_log, run};
use nalgebra::DVector;

use common::{load, load_edited};

/// Rest-to-rest inputs moving `from` to `to` in `steps` (even) steps of `ts`.
fn rest_to_rest(from: &[f64], to: &[f64], steps: usize, ts: f64) -> Vec<ControlInput> {
    let half = (steps / 2) as f64 * ts;
    let a = DVector::from_iterator(from.len(), from.iter().zip(to).map(|(f, t)| (t - f) / (half * half)));
    (0..steps).map(|k| if k < steps / 2 { a.clone() } else { -&a }).collect()
}

#[test]
fn stationary_robots_have_constant_substep_margins() {
    let sc = load("benchmark_2r");
    let inputs = vec![vec![DVector::zeros(6), DVector::zeros(6)]; 4];
    let log = open_loop_log(&sc, &inputs).unwrap();
    let audit = audit_clearance(&log, &sc, 10).unwrap();
    assert_eq!(audit.per_step_min_margin.len(), 4);
    for m in &audit.per_step_min_margin {
        assert_eq!(m.to_bits(), audit.per_step_min_margin[0].to_bits());
    }
    assert_eq!(audit.min_margin.to_bits(), audit.sampled_min_margin.to_bits());
}

#[test]
fn colliding_open_loop_inputs_are_detected() {
    let sc = load("shared_tray_2r");
    let steps = 20;
    let per_robot: Vec<Vec<ControlInput>> = sc
        .robots
        .iter()
        .map(|r| rest_to_rest(r.initial.q.as_slice(), r.tasks[0].target.q.as_slice(), steps, sc.ts))
        .collect();
    let inputs: Vec<Vec<ControlInput>> = (0..steps).map(|k| per_robot.iter().map(|u| u[k].clone()).collect()).collect();
    let log = open_loop_log(&sc, &inputs).unwrap();
    let audit = audit_clearance(&log, &sc, 10).unwrap();
    assert!(audit.min_margin < 0.0, "collision missed: {}", audit.min_margin);
    assert!(audit.min_margin <= audit.sampled_min_margin);
    let end = &log.final_states[0];
    assert!(end.distance(&sc.robots[0].tasks[0].target) < 1e-9);
}

#[test]
fn zero_substeps_are_rejected() {
    let sc = load("benchmark_2r");
    let log = open_loop_log(&sc, &[vec![DVector::zeros(6), DVector::zeros(6)]]).unwrap();
    assert!(audit_clearance(&log, &sc, 0).is_err());
}

#[test]
fn crossing_audit_sees_between_samples() {
    let sc = load("crossing_2r");
    let log = run(&sc).unwrap();
    let audit = audit_clearance(&log, &sc, 10).unwrap();
    let sampled = log.steps.iter().map(|s| s.min_els_margin).fold(f64::INFINITY, f64::min);
    assert_eq!(audit.sampled_min_margin.to_bits(), sampled.to_bits());
    assert!(audit.min_margin <= audit.sampled_min_margin);
    assert!(audit.min_margin >= -1e-6, "tunnelling between samples: {}", audit.min_margin);
    let dip = audit.sampled_min_margin - audit.min_margin;
    assert!(dip <= 0.1 * audit.sampled_min_margin, "substep {} vs sampled {}", audit.min_margin, audit.sampled_min_margin);
    assert!(audit.min_link_distance > 0.0);
    let finer = audit_clearance(&log, &sc, 40).unwrap();
    assert!(finer.min_margin <= audit.min_margin + 1e-3);
}

#[test]
fn every_shipped_scenario_keeps_its_clearance() {
    for name in ["shared_tray_2r", "benchmark_2r", "row_3r", "square_4r", "decoupled_2r"] {
        let sc = load_edited(name, |_| {});
        let log = run(&sc).unwrap();
        assert!(log.all_completed(), "{name} did not finish");
        let audit = audit_clearance(&log, &sc, 10).unwrap();
        assert!(audit.min_margin >= -1e-6, "{name}: substep margin {}", audit.min_margin);
        assert!(audit.min_link_distance > 0.0, "{name}: links touch");
    }
}
