mod common;

use mdmpc::comms::{in_process_network, Endpoint, LossyEndpoint, DEFAULT_MAX_STALE};
use mdmpc::sim::{run, run_with_endpoints, SimLog, TransportKind};

use common::load_edited;

fn trajectory_frame_of(frame: &[u8], robot: u16, steps: std::ops::Range<u64>) -> bool {
    frame.len() > 16
        && frame[5] == 1
        && u16::from_le_bytes([frame[6], frame[7]]) == robot
        && steps.contains(&u64::from_le_bytes(frame[8..16].try_into().unwrap()))
}

/// In-process network where robot 1 loses its frames of `steps`.
fn lossy_network(steps: std::ops::Range<u64>) -> Vec<Box<dyn Endpoint>> {
    in_process_network(2)
        .into_iter()
        .map(|e| {
            let steps = steps.clone();
            Box::new(LossyEndpoint::new(e, move |f| trajectory_frame_of(f, 1, steps.clone()))) as Box<dyn Endpoint>
        })
        .collect()
}

fn assert_bit_identical(a: &SimLog, b: &SimLog) {
    assert_eq!(a.steps.len(), b.steps.len());
    for (sa, sb) in a.steps.iter().zip(&b.steps) {
        for (ra, rb) in sa.robots.iter().zip(&sb.robots) {
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ra.x_s.q.as_slice()), bits(rb.x_s.q.as_slice()), "step {}", sa.step);
            assert_eq!(bits(ra.x_s.qd.as_slice()), bits(rb.x_s.qd.as_slice()), "step {}", sa.step);
            assert_eq!(bits(ra.u.as_slice()), bits(rb.u.as_slice()), "step {}", sa.step);
            assert_eq!((ra.gamma_d, ra.gamma_r, ra.target_id), (rb.gamma_d, rb.gamma_r, rb.target_id));
        }
    }
}

#[test]
fn udp_loopback_run_matches_in_process_run() {
    let inproc = load_edited("benchmark_2r", |f| f.transport = TransportKind::Inproc);
    let udp = load_edited("benchmark_2r", |f| f.transport = TransportKind::Udp);
    let a = run(&inproc).unwrap();
    let b = run(&udp).unwrap();
    assert!(a.all_completed());
    assert_eq!(b.staleness_events, 0);
    assert_bit_identical(&a, &b);
}

#[test]
fn one_lost_prediction_is_one_staleness_event() {
    let sc = load_edited("benchmark_2r", |_| {});
    let log = run_with_endpoints(&sc, lossy_network(10..11)).unwrap();
    assert_eq!(log.staleness_events, 1);
    assert!(!log.safety_stop);
    assert!(log.all_completed());
}

#[test]
fn a_silent_neighbour_triggers_a_safety_stop() {
    let sc = load_edited("benchmark_2r", |_| {});
    let first_lost = 10;
    let log = run_with_endpoints(&sc, lossy_network(first_lost..first_lost + DEFAULT_MAX_STALE as u64)).unwrap();
    assert!(log.safety_stop);
    assert!(!log.all_completed());
    assert_eq!(log.staleness_events, DEFAULT_MAX_STALE);
    for x in &log.final_states {
        assert!(x.qd.amax() <= 1e-9, "robot still moving: {}", x.qd.amax());
    }
    let stop = first_lost + DEFAULT_MAX_STALE as u64 + 1;
    assert!(log.steps.iter().filter(|s| s.step >= stop).all(|s| s.robots.iter().all(|r| r.solve_time.is_none())));
}

#[test]
fn fewer_lost_predictions_than_the_limit_do_not_stop() {
    let sc = load_edited("benchmark_2r", |_| {});
    let log = run_with_endpoints(&sc, lossy_network(10..10 + DEFAULT_MAX_STALE as u64 - 1)).unwrap();
    assert!(!log.safety_stop);
    assert_eq!(log.staleness_events, DEFAULT_MAX_STALE - 1);
    assert!(log.all_completed());
}
