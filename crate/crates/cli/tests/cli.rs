use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use feedopt::presets;
use feedopt::scenario::Scenario;
use feedopt::ExperimentConfig;

fn feedopt(args: &[&str], out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_feedopt"));
    cmd.args(args).env_remove("FEEDOPT_OUT_DIR");
    if let Some(dir) = out {
        cmd.env("FEEDOPT_OUT_DIR", dir);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join(format!("{}.toml", cfg.name));
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn short_two_link() -> ExperimentConfig {
    let mut cfg = presets::two_link();
    cfg.simulation.t_span = [0.0, 4.0];
    cfg
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn missing_config_exits_with_config_status() {
    let o = feedopt(&["run", "does-not-exist.toml"], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("does-not-exist.toml"));
}

#[test]
fn invalid_config_exits_with_config_status() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = short_two_link();
    cfg.simulation.dt = 0.01;
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    let o = feedopt(&["run", path.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epsilon/10"));
}

#[test]
fn run_writes_artifacts_under_out() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &short_two_link());
    let out = dir.path().join("results");
    let o = feedopt(&["--out", out.to_str().unwrap(), "run", path.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for file in ["trajectory.csv", "report.toml", "certificate.toml"] {
        assert!(out.join("two_link_static").join(file).is_file(), "{file}");
    }
    let report = std::fs::read_to_string(out.join("two_link_static/report.toml")).unwrap();
    assert!(report.contains("envelope_violations = 0"));
    assert!(stdout(&o).contains("envelope violations 0"));
}

#[test]
fn env_var_sets_output_dir_and_flag_wins() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &short_two_link());
    let from_env = dir.path().join("env");
    let o = feedopt(&["--quiet", "run", path.to_str().unwrap()], Some(&from_env));
    assert!(o.status.success());
    assert!(stdout(&o).is_empty());
    assert!(from_env.join("two_link_static/trajectory.csv").is_file());
    let from_flag = dir.path().join("flag");
    let o = feedopt(&["--out", from_flag.to_str().unwrap(), "run", path.to_str().unwrap()], Some(&from_env));
    assert!(o.status.success());
    assert!(from_flag.join("two_link_static/trajectory.csv").is_file());
}

#[test]
fn csv_output_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &short_two_link());
    let csv = |name: &str| {
        let out = dir.path().join(name);
        assert!(feedopt(&["-q", "run", path.to_str().unwrap()], Some(&out)).status.success());
        std::fs::read(out.join("two_link_static/trajectory.csv")).unwrap()
    };
    assert_eq!(csv("a"), csv("b"));
}

#[test]
fn certify_prints_the_library_certificate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = presets::equality_scalar();
    let path = write_config(dir.path(), &cfg);
    let o = feedopt(&["certify", path.to_str().unwrap()], None);
    assert!(o.status.success());
    let expected = Scenario::build(&cfg).unwrap().certify().unwrap();
    assert_eq!(stdout(&o), format!("{expected}\n"));
    assert!(stdout(&o).contains(&format!("{:.6e}", expected.epsilon_max())));
}

#[test]
fn certify_reports_failing_conditions() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = presets::scalar_static();
    cfg.gains.epsilon = 0.5;
    cfg.simulation.dt = 0.05;
    let path = write_config(dir.path(), &cfg);
    let o = feedopt(&["certify", path.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn compare_single_config_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &short_two_link());
    let out = dir.path().join("cmp");
    let o = feedopt(&["--out", out.to_str().unwrap(), "compare", path.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(out.join("two_link_static/trajectory.csv").is_file());
}

#[test]
fn compare_rejects_mismatched_horizons() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_config(dir.path(), &short_two_link());
    let mut other = short_two_link();
    other.name = "two_link_long".into();
    other.simulation.t_span = [0.0, 5.0];
    let b = write_config(dir.path(), &other);
    let o = feedopt(&["compare", a.to_str().unwrap(), b.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("incompatible"));
}

#[test]
fn shipped_configs_load() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        count += 1;
    }
    assert_eq!(count, presets::all().len());
}
