#![allow(dead_code)]

use std::path::{Path, PathBuf};

use mdmpc::sim::{ScenarioConfig, ScenarioFile};

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn scenario_path(name: &str) -> PathBuf {
    data_dir().join("scenarios").join(format!("{name}.toml"))
}

pub fn load(name: &str) -> ScenarioConfig {
    ScenarioConfig::load(&scenario_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Parses a shipped scenario file, lets `edit` change it and resolves it.
pub fn load_edited(name: &str, edit: impl FnOnce(&mut ScenarioFile)) -> ScenarioConfig {
    let path = scenario_path(name);
    let text = std::fs::read_to_string(&path).unwrap();
    let mut file: ScenarioFile = toml::from_str(&text).unwrap();
    edit(&mut file);
    ScenarioConfig::from_file(file, path.parent().unwrap()).unwrap()
}

pub const SHIPPED: [&str; 6] = ["crossing_2r", "shared_tray_2r", "benchmark_2r", "decoupled_2r", "row_3r", "square_4r"];
