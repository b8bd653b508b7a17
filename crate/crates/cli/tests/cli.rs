use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn scenario(name: &str) -> PathBuf {
    data().join("scenarios").join(format!("{name}.toml"))
}

fn mdmpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdmpc")).args(args).output().expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn shipped_scenarios_pass_the_check() {
    for name in ["crossing_2r", "shared_tray_2r", "benchmark_2r", "decoupled_2r", "row_3r", "square_4r"] {
        let out = mdmpc(&["check", "--scenario", arg(&scenario(name))]);
        assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn target_outside_the_limits_fails_the_check_and_names_the_joint() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenario("crossing_2r")).unwrap();
    let text = text.replacen("[-1.2408, -0.8670,", "[-1.2408, -9.8670,", 1).replace("../models/", "models/");
    assert!(text.contains("-9.8670"));
    std::fs::create_dir(dir.path().join("models")).unwrap();
    std::fs::copy(data().join("models/ur3_like.toml"), dir.path().join("models/ur3_like.toml")).unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, text).unwrap();
    let out = mdmpc(&["check", "--scenario", arg(&bad)]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("task 0 target: joint 2"), "{stderr}");
}

#[test]
fn run_writes_log_and_metrics_and_honours_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = mdmpc(&[
        "run",
        "--scenario",
        arg(&scenario("benchmark_2r")),
        "--out",
        arg(&out_dir),
        "--horizon",
        "10",
        "--seed",
        "42",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = read_json(&out_dir.join("metrics.json"));
    assert_eq!(summary["horizon"], 10);
    assert_eq!(summary["seed"], 42);
    assert_eq!(summary["safe"], true);
    assert_eq!(summary["metrics"]["all_completed"], true);
    let csv = std::fs::read_to_string(out_dir.join("log.csv")).unwrap();
    let steps = summary["metrics"]["steps"].as_u64().unwrap() as usize;
    assert_eq!(csv.lines().count(), 1 + 2 * steps);
}

#[test]
fn identical_runs_give_identical_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let strip = |csv: String| -> Vec<String> {
        let header: Vec<String> = csv.lines().next().unwrap().split(',').map(String::from).collect();
        let skip = header.iter().position(|h| h == "solve_ms").unwrap();
        csv.lines()
            .map(|l| l.split(',').enumerate().filter(|(i, _)| *i != skip).map(|(_, v)| v).collect::<Vec<_>>().join(","))
            .collect()
    };
    let mut logs = Vec::new();
    for k in 0..2 {
        let out_dir = dir.path().join(format!("run{k}"));
        let out = mdmpc(&["run", "--scenario", arg(&scenario("crossing_2r")), "--out", arg(&out_dir)]);
        assert!(out.status.success());
        logs.push(strip(std::fs::read_to_string(out_dir.join("log.csv")).unwrap()));
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn exhausted_budget_gives_a_failing_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenario("benchmark_2r")).unwrap().replace("step_budget = 300", "step_budget = 5");
    let short = data().join("scenarios");
    let path = dir.path().join("short.toml");
    std::fs::write(&path, text.replace("../models/", &format!("{}/../models/", short.display()))).unwrap();
    let out = mdmpc(&["run", "--scenario", arg(&path), "--out", arg(&dir.path().join("out"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn benchmark_shows_a_slower_centralized_solve() {
    let dir = tempfile::tempdir().unwrap();
    let out = mdmpc(&[
        "benchmark",
        "--scenario",
        arg(&scenario("benchmark_2r")),
        "--mode",
        "dmpc,cmpc",
        "--horizons",
        "10",
        "--out",
        arg(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_json(&dir.path().join("benchmark.json"));
    let mean = |mode: &str| {
        rows.as_array().unwrap().iter().find(|r| r["mode"] == mode).unwrap()["mean_ms"].as_f64().unwrap()
    };
    assert!(mean("cmpc") > mean("dmpc"), "cmpc {} dmpc {}", mean("cmpc"), mean("dmpc"));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("RMS vs CMPC") && stdout.contains("±"));
}

#[test]
fn generated_scenario_is_valid_and_refers_to_its_model_relatively() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/gen.toml");
    let model = data().join("models/ur3_like.toml");
    let out = mdmpc(&[
        "gen", "--robots", "3", "--objects", "4", "--seed", "8", "--out", arg(&path), "--model", arg(&model),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("model = \"../"), "model path not relative");
    let check = mdmpc(&["check", "--scenario", arg(&path)]);
    assert!(check.status.success(), "{}", String::from_utf8_lossy(&check.stderr));
}

#[test]
fn infeasible_generation_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let model = data().join("models/ur3_like.toml");
    for extra in [["--robots", "5", "--objects", "2"], ["--robots", "2", "--objects", "500"]] {
        let mut args = vec!["gen", "--seed", "1", "--model", arg(&model)];
        let path = dir.path().join("x.toml");
        args.extend(["--out", arg(&path)]);
        args.extend(extra);
        let out = mdmpc(&args);
        assert!(!out.status.success());
        assert!(!path.exists());
    }
}
