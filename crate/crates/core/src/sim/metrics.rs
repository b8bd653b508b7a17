//! Summary statistics of a run.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::sim::log::SimLog;

/// Solve-time statistics of one robot in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveTiming {
    pub samples: usize,
    pub mean_ms: f64,
    /// Sample standard deviation; zero for fewer than two samples.
    pub std_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub scenario: String,
    pub steps: usize,
    pub execution_steps: Option<u64>,
    /// Execution time in seconds of simulated time.
    pub execution_time: Option<f64>,
    pub solve_time: Vec<SolveTiming>,
    pub completed: Vec<bool>,
    pub all_completed: bool,
    /// Rising edges of `γ_D`, summed over robots.
    pub deadlock_events: usize,
    pub resolutions: usize,
    pub fallbacks: usize,
    pub min_els_margin: f64,
    pub min_link_distance: f64,
    pub safety_stop: bool,
    pub staleness_events: usize,
}

/// Mean and sample standard deviation.
pub fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

pub fn metrics(log: &SimLog) -> Result<Metrics> {
    if log.steps.is_empty() {
        return Err(Error::EmptyLog);
    }
    let m = log.robot_count();
    let mut solve_time = Vec::with_capacity(m);
    let mut deadlock_events = 0;
    let mut fallbacks = 0;
    for i in 0..m {
        let ms: Vec<f64> =
            log.steps.iter().filter_map(|s| s.robots[i].solve_time).map(|d| d.as_secs_f64() * 1e3).collect();
        let (mean_ms, std_ms) = mean_std(&ms);
        solve_time.push(SolveTiming { samples: ms.len(), mean_ms, std_ms });
        let mut prev = false;
        for s in &log.steps {
            let r = &s.robots[i];
            if r.gamma_d && !prev {
                deadlock_events += 1;
            }
            prev = r.gamma_d;
            fallbacks += usize::from(r.fallback);
        }
    }
    Ok(Metrics {
        scenario: log.scenario.clone(),
        steps: log.steps.len(),
        execution_steps: log.execution_steps,
        execution_time: log.execution_steps.map(|k| k as f64 * log.ts),
        solve_time,
        completed: log.completed(),
        all_completed: log.all_completed(),
        deadlock_events,
        resolutions: log.deadlocks.len(),
        fallbacks,
        min_els_margin: log.steps.iter().map(|s| s.min_els_margin).fold(f64::INFINITY, f64::min),
        min_link_distance: log.steps.iter().map(|s| s.min_link_distance).fold(f64::INFINITY, f64::min),
        safety_stop: log.safety_stop,
        staleness_events: log.staleness_events,
    })
}

/// Mean and sample standard deviation of all solve times of a log, pooled
/// over robots. A centralized log records its joint solve once per robot, so
/// the pooled mean is the mean joint solve time.
pub fn pooled_solve_time(log: &SimLog) -> SolveTiming {
    let ms: Vec<f64> = log
        .steps
        .iter()
        .flat_map(|s| s.robots.iter().filter_map(|r| r.solve_time))
        .map(|d| d.as_secs_f64() * 1e3)
        .collect();
    let (mean_ms, std_ms) = mean_std(&ms);
    SolveTiming { samples: ms.len(), mean_ms, std_ms }
}

/// Root-mean-square joint-position deviation between two logs of the same
/// scenario, over the steps both logs cover.
pub fn rms_deviation(a: &SimLog, b: &SimLog) -> Result<f64> {
    let steps = a.steps.len().min(b.steps.len());
    if steps == 0 {
        return Err(Error::EmptyLog);
    }
    if a.robot_count() != b.robot_count() {
        return Err(Error::Dimension(format!("logs have {} and {} robots", a.robot_count(), b.robot_count())));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (sa, sb) in a.steps.iter().zip(&b.steps) {
        for (ra, rb) in sa.robots.iter().zip(&sb.robots) {
            if ra.x_s.dof() != rb.x_s.dof() {
                return Err(Error::Dimension(format!("robot {} changes joint count between logs", ra.robot_id)));
            }
            sum += (&ra.x_s.q - &rb.x_s.q).norm_squared();
            count += ra.x_s.dof();
        }
    }
    Ok((sum / count as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use std::time::Duration;

    use nalgebra::DVector;

    use super::*;
    use crate::dynamics::JointState;
    use crate::sim::log::{ControlMode, RobotRecord, StepRecord};

    fn log_with(times_ms: &[f64], deadlock: &[bool]) -> SimLog {
        let steps = times_ms
            .iter()
            .zip(deadlock)
            .enumerate()
            .map(|(k, (&t, &d))| StepRecord {
                step: k as u64,
                time: 0.2 * k as f64,
                robots: vec![RobotRecord {
                    robot_id: 0,
                    x_s: JointState::zeros(1),
                    u: DVector::zeros(1),
                    objective: 1.0,
                    solve_time: Some(Duration::from_secs_f64(t / 1e3)),
                    gamma_d: d,
                    gamma_r: true,
                    target_id: 0,
                    velocity_change: 0.0,
                    residuum: 1.0,
                    fallback: false,
                }],
                min_els_margin: 1.0 - k as f64,
                min_link_distance: 0.5,
            })
            .collect();
        SimLog {
            scenario: "synthetic".into(),
            mode: ControlMode::Distributed,
            ts: 0.2,
            horizon: 10,
            steps,
            final_states: vec![JointState::zeros(1)],
            tasks_completed: vec![1],
            task_counts: vec![1],
            execution_steps: Some(times_ms.len() as u64),
            safety_stop: false,
            staleness_events: 0,
            deadlocks: Vec::new(),
            releases: Vec::new(),
        }
    }

    #[test]
    fn rms_deviation_of_shifted_logs() {
        let a = log_with(&[1.0, 1.0, 1.0], &[false; 3]);
        let mut b = a.clone();
        for s in &mut b.steps {
            s.robots[0].x_s.q[0] = 0.5;
        }
        b.steps.push(b.steps[0].clone());
        assert!((rms_deviation(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(rms_deviation(&a, &a).unwrap(), 0.0);
        assert_eq!(pooled_solve_time(&a).mean_ms, 1.0);
    }

    #[test]
    fn constant_times_have_zero_spread() {
        let m = metrics(&log_with(&[4.0; 5], &[false; 5])).unwrap();
        assert!((m.solve_time[0].mean_ms - 4.0).abs() < 1e-9);
        assert!(m.solve_time[0].std_ms.abs() < 1e-9);
    }

    #[test]
    fn three_rows_by_hand() {
        // mean (1 + 2 + 6) / 3 = 3; sample variance (4 + 1 + 9) / 2 = 7.
        let m = metrics(&log_with(&[1.0, 2.0, 6.0], &[true, false, true])).unwrap();
        assert!((m.solve_time[0].mean_ms - 3.0).abs() < 1e-9);
        assert!((m.solve_time[0].std_ms - 7f64.sqrt()).abs() < 1e-9);
        assert_eq!(m.deadlock_events, 2);
        assert_eq!(m.min_els_margin, -1.0);
        assert!((m.execution_time.unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn empty_log_is_an_error() {
        assert!(matches!(metrics(&log_with(&[], &[])), Err(Error::EmptyLog)));
    }
}
