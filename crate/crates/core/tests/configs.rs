use std::path::PathBuf;

use feedopt::presets;
use feedopt::ExperimentConfig;

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn shipped_configs_match_presets() {
    for preset in presets::all() {
        let path = configs_dir().join(format!("{}.toml", preset.name));
        let mut loaded = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        loaded.base_dir = Default::default();
        assert_eq!(loaded, preset, "{}", path.display());
    }
}

#[test]
fn every_shipped_config_is_a_preset() {
    let names: Vec<String> = presets::all().into_iter().map(|c| c.name).collect();
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
        assert!(names.contains(&stem), "{} has no preset", path.display());
    }
}
