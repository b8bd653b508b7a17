mod common;

use mdmpc::sim::{logged_inputs, metrics, run, ScenarioConfig, SimLog, TaskFile};

use common::{load, load_edited};

fn single_robot_one_target() -> ScenarioConfig {
    load_edited("benchmark_2r", |f| {
        f.robot.truncate(1);
        f.robot[0].task.truncate(1);
        f.step_budget = 200;
    })
}

fn assert_same_trajectory(a: &SimLog, ra: usize, b: &SimLog, rb: usize, steps: usize, tol: f64) {
    for k in 0..steps {
        let (xa, xb) = (&a.steps[k].robots[ra].x_s, &b.steps[k].robots[rb].x_s);
        let d = (&xa.q - &xb.q).amax().max((&xa.qd - &xb.qd).amax());
        assert!(d <= tol, "step {k}: robots {ra}/{rb} differ by {d}");
        let du = (&a.steps[k].robots[ra].u - &b.steps[k].robots[rb].u).amax();
        assert!(du <= tol, "step {k}: inputs differ by {du}");
    }
}

#[test]
fn single_robot_reaches_its_target_and_stops() {
    let sc = single_robot_one_target();
    let log = run(&sc).unwrap();
    assert!(log.all_completed(), "did not finish within {} steps", sc.step_budget);
    let target = &sc.robots[0].tasks[0].target;
    let arrival = log
        .steps
        .iter()
        .position(|s| s.robots[0].residuum <= 4e-2)
        .expect("residuum never reached the tolerance");
    for s in &log.steps[arrival..] {
        assert!(s.robots[0].residuum <= 4e-2, "left the target at step {}", s.step);
    }
    let last = log.steps.last().unwrap();
    assert!(last.robots[0].u.amax() < 1e-6, "input did not vanish: {}", last.robots[0].u.amax());
    let end = &log.final_states[0];
    assert!(end.distance(target) <= 4e-2);
}

#[test]
fn decoupled_robots_move_as_if_alone() {
    let sc = load("decoupled_2r");
    let configs = sc.agent_configs().unwrap();
    assert!(configs.iter().all(|c| c.pair_set.pairs.is_empty()));
    let joint = run(&sc).unwrap();
    assert!(joint.all_completed());
    for i in 0..2 {
        let alone = run(&sc.subset(&[i]).unwrap()).unwrap();
        assert!(alone.all_completed());
        assert_same_trajectory(&joint, i, &alone, 0, alone.steps.len(), 1e-6);
    }
}

#[test]
fn crossing_robots_stay_clear_and_finish() {
    let sc = load("crossing_2r");
    let log = run(&sc).unwrap();
    assert!(log.all_completed());
    for s in &log.steps {
        assert!(s.min_els_margin >= -1e-6, "step {}: margin {}", s.step, s.min_els_margin);
        assert!(s.min_link_distance > 0.0, "step {}: links touch", s.step);
    }
    assert_eq!(metrics(&log).unwrap().fallbacks, 0);
}

#[test]
fn identical_scenarios_give_identical_logs() {
    let sc = load("shared_tray_2r");
    let a = run(&sc).unwrap();
    let b = run(&sc).unwrap();
    assert_eq!(a.steps.len(), b.steps.len());
    for (sa, sb) in a.steps.iter().zip(&b.steps) {
        for (ra, rb) in sa.robots.iter().zip(&sb.robots) {
            assert_eq!(ra.x_s, rb.x_s);
            assert_eq!(ra.u, rb.u);
            assert_eq!(ra.gamma_d, rb.gamma_d);
            assert_eq!(ra.gamma_r, rb.gamma_r);
            assert_eq!(ra.target_id, rb.target_id);
        }
        assert_eq!(sa.min_els_margin.to_bits(), sb.min_els_margin.to_bits());
    }
    assert_eq!(a.deadlocks, b.deadlocks);
    assert_eq!(a.final_states, b.final_states);
}

#[test]
fn logged_states_follow_the_zero_order_hold() {
    let sc = load("crossing_2r");
    let log = run(&sc).unwrap();
    let ts = sc.ts;
    let inputs = logged_inputs(&log);
    for (k, (step, u_k)) in log.steps.iter().zip(&inputs).enumerate() {
        for (i, (rec, u)) in step.robots.iter().zip(u_k).enumerate() {
            let x = &rec.x_s;
            let next = match log.steps.get(k + 1) {
                Some(s) => s.robots[i].x_s.clone(),
                None => log.final_states[i].clone(),
            };
            let q = &x.q + &x.qd * ts + u * (0.5 * ts * ts);
            let qd = &x.qd + u * ts;
            assert!((&next.q - q).amax() <= 1e-10, "step {k} robot {i}: position mismatch");
            assert!((&next.qd - qd).amax() <= 1e-10, "step {k} robot {i}: velocity mismatch");
        }
    }
}

#[test]
fn exhausted_budget_is_reported_in_the_log() {
    let sc = load_edited("benchmark_2r", |f| f.step_budget = 5);
    let log = run(&sc).unwrap();
    assert_eq!(log.steps.len(), 5);
    assert!(!log.all_completed());
    assert_eq!(log.execution_steps, None);
    assert_eq!(log.completed(), vec![false, false]);
    let m = metrics(&log).unwrap();
    assert!(!m.all_completed);
}

#[test]
fn dwell_holds_the_robot_without_solving() {
    let sc = load_edited("benchmark_2r", |f| {
        f.robot.truncate(1);
        f.robot[0].task = vec![
            TaskFile { target: f.robot[0].task[0].target.clone(), dwell: Some(4) },
            TaskFile { target: f.robot[0].task[1].target.clone(), dwell: Some(0) },
        ];
    });
    let log = run(&sc).unwrap();
    assert!(log.all_completed());
    let holds: Vec<usize> = log
        .steps
        .iter()
        .enumerate()
        .filter(|(_, s)| s.robots[0].solve_time.is_none())
        .map(|(k, _)| k)
        .collect();
    assert_eq!(holds.len(), 4, "hold steps {holds:?}");
    assert!(holds.windows(2).all(|w| w[1] == w[0] + 1));
    for &k in &holds {
        assert!(log.steps[k].robots[0].objective.is_nan());
    }
}

#[test]
fn csv_has_one_row_per_robot_and_step() {
    let sc = load_edited("benchmark_2r", |f| f.step_budget = 3);
    let log = run(&sc).unwrap();
    let csv = log.to_csv();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("t,robot_id,q1,"));
    assert!(header.ends_with("cost,solve_ms,gamma_D,gamma_R,target_id,min_els_margin,min_link_dist"));
    assert_eq!(header.split(',').count(), 2 + 3 * 6 + 7);
    assert_eq!(lines.clone().count(), 3 * 2);
    for row in lines {
        assert_eq!(row.split(',').count(), 2 + 3 * 6 + 7);
    }
}
