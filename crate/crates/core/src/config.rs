//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controllers::{ControllerGains, MpcConfig};
use crate::problem::{ConstraintKind, InputSet};
use crate::signal::ScalarSignal;

/// Row-major matrix as written in TOML.
pub type Rows = Vec<Vec<f64>>;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantBlock {
    pub a: Rows,
    pub b: Rows,
    pub c: Rows,
    /// Defaults to zeros.
    #[serde(default)]
    pub d: Option<Rows>,
    pub e: Rows,
    /// Lyapunov right-hand side; identity when absent.
    #[serde(default)]
    pub q_x: Option<Rows>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostBlock {
    pub q_u: Rows,
    pub r_u: Vec<ScalarSignal>,
    /// Defaults to zeros.
    #[serde(default)]
    pub q_y: Option<Rows>,
    #[serde(default)]
    pub r_y: Option<Vec<ScalarSignal>>,
    #[serde(default)]
    pub c: Option<Vec<ScalarSignal>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintBlock {
    pub k: Rows,
    pub e: Vec<ScalarSignal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemBlock {
    pub kind: ConstraintKind,
    #[serde(default)]
    pub nu: f64,
    /// Defaults to the full input space.
    #[serde(default)]
    pub input_set: Option<InputSet>,
    pub cost: CostBlock,
    pub constraint: ConstraintBlock,
    /// Disturbance `w_t`; zeros when absent.
    #[serde(default)]
    pub disturbance: Option<Vec<ScalarSignal>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseBlock {
    pub amplitude: f64,
    pub knot_spacing: f64,
    /// Defaults to the experiment seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkBlock {
    /// Network file, relative to the config file.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// `"example"` selects the shipped seven-link network.
    #[serde(default)]
    pub builtin: Option<String>,
    /// Desired on-ramp flows.
    pub u_ref: Vec<f64>,
    /// Identity when absent.
    #[serde(default)]
    pub q_u: Option<Rows>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_network_nu")]
    pub nu: f64,
    #[serde(default)]
    pub noise: Option<NoiseBlock>,
    /// Density bound as a fraction of each capacity ceiling, shared by the
    /// metering constraint and the ALINEA setpoints.
    #[serde(default = "default_ceiling_fraction")]
    pub ceiling_fraction: f64,
}

fn default_delta() -> f64 {
    crate::traffic::DEFAULT_DELTA
}

fn default_network_nu() -> f64 {
    1e-2
}

fn default_ceiling_fraction() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControllerBlock {
    OpenLoop { u: Vec<f64> },
    ProjectedPd,
    DiscontinuousPd {
        #[serde(default)]
        deltas: Option<Vec<f64>>,
    },
    EqualityPd,
    Alinea { gain: f64 },
    Mpc(MpcConfig),
}

impl ControllerBlock {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerBlock::OpenLoop { .. } => "open_loop",
            ControllerBlock::ProjectedPd => "projected_pd",
            ControllerBlock::DiscontinuousPd { .. } => "discontinuous_pd",
            ControllerBlock::EqualityPd => "equality_pd",
            ControllerBlock::Alinea { .. } => "alinea",
            ControllerBlock::Mpc(_) => "mpc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationBlock {
    pub t_span: [f64; 2],
    pub dt: f64,
    /// Log period in steps.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Defaults to the plant at rest for `u0` and `w(t0)`.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub u0: Option<Vec<f64>>,
    #[serde(default)]
    pub lambda0: Option<Vec<f64>>,
    /// Run the `ε = 0` loop.
    #[serde(default)]
    pub reduced: bool,
    #[serde(default = "default_true")]
    pub oracle: bool,
    #[serde(default = "default_true")]
    pub certify: bool,
    /// Start of the post-transient window; a quarter of the span when absent.
    #[serde(default)]
    pub transient: Option<f64>,
}

fn default_log_every() -> usize {
    10
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub plant: Option<PlantBlock>,
    #[serde(default)]
    pub network: Option<NetworkBlock>,
    #[serde(default)]
    pub problem: Option<ProblemBlock>,
    pub controller: ControllerBlock,
    pub gains: ControllerGains,
    pub simulation: SimulationBlock,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse { path: path.to_path_buf(), message },
            other => other,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    /// Parses and validates a config held in memory.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)
            .map_err(|e| ConfigError::Parse { path: PathBuf::from("<string>"), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Structural checks; dimension checks happen when the scenario is built.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        if self.name.trim().is_empty() {
            problems.push("name must not be empty".to_string());
        }
        match (&self.plant, &self.network) {
            (Some(_), Some(_)) => problems.push("give either [plant] or [network], not both".into()),
            (None, None) => problems.push("one of [plant] or [network] is required".into()),
            (Some(_), None) if self.problem.is_none() => problems.push("[plant] requires a [problem] block".into()),
            (None, Some(_)) if self.problem.is_some() => {
                problems.push("[network] builds its own problem; remove [problem]".into())
            }
            _ => {}
        }
        if let Some(net) = &self.network {
            if net.path.is_some() == net.builtin.is_some() {
                problems.push("[network] needs exactly one of path or builtin".into());
            }
            if let Some(b) = &net.builtin {
                if b != "example" {
                    problems.push(format!("unknown builtin network '{b}'"));
                }
            }
            if let Some(noise) = &net.noise {
                if !(noise.amplitude >= 0.0 && noise.knot_spacing > 0.0) {
                    problems.push("noise needs amplitude >= 0 and knot_spacing > 0".into());
                }
            }
        }
        if let Err(e) = self.gains.validate() {
            problems.push(e.to_string());
        }
        match &self.controller {
            ControllerBlock::ProjectedPd | ControllerBlock::DiscontinuousPd { .. } if self.gains.eta.is_none() => {
                problems.push(format!("controller {} requires gains.eta", self.controller.name()))
            }
            ControllerBlock::EqualityPd if self.gains.eta_u.is_none() || self.gains.eta_lambda.is_none() => {
                problems.push("controller equality_pd requires gains.eta_u and gains.eta_lambda".into())
            }
            ControllerBlock::Alinea { gain } => {
                if self.network.is_none() {
                    problems.push("controller alinea requires a [network]".into());
                }
                if !(*gain > 0.0) {
                    problems.push(format!("alinea gain must be positive, got {gain}"));
                }
            }
            ControllerBlock::Mpc(_) if self.simulation.reduced => {
                problems.push("mpc needs a plant model; it cannot run with simulation.reduced".into())
            }
            _ => {}
        }
        let sim = &self.simulation;
        let [t0, t1] = sim.t_span;
        if !(t0.is_finite() && t1.is_finite() && t1 >= t0) {
            problems.push(format!("t_span [{t0}, {t1}] must be finite and ordered"));
        }
        if !(sim.dt > 0.0 && sim.dt.is_finite()) {
            problems.push(format!("dt must be positive, got {}", sim.dt));
        } else if !sim.reduced && sim.dt > self.gains.epsilon / 10.0 * (1.0 + 1e-12) {
            problems.push(format!("dt = {} exceeds epsilon/10 = {}", sim.dt, self.gains.epsilon / 10.0));
        }
        if sim.log_every == 0 {
            problems.push("log_every must be at least 1".into());
        }
        if sim.reduced && self.network.is_some() {
            problems.push("simulation.reduced is only available with [plant]".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    /// `output_dir` resolved against the config location.
    pub fn resolved_output_dir(&self) -> Option<PathBuf> {
        self.output_dir.as_ref().map(|p| self.base_dir.join(p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCALAR: &str = r#"
name = "scalar"

[plant]
a = [[-1.0]]
b = [[1.0]]
c = [[1.0]]
e = [[1.0]]

[problem]
kind = "inequality"
nu = 1.0

[problem.cost]
q_u = [[2.0]]
r_u = [1.0]

[problem.constraint]
k = [[1.0]]
e = [{ kind = "sinusoid", amplitude = 0.1, frequency = 0.05 }]

[controller]
kind = "projected_pd"

[gains]
epsilon = 0.01
eta = 0.05

[simulation]
t_span = [0.0, 10.0]
dt = 0.001
"#;

    #[test]
    fn parses_scalar() {
        let cfg = ExperimentConfig::parse(SCALAR).unwrap();
        assert_eq!(cfg.controller, ControllerBlock::ProjectedPd);
        assert_eq!(cfg.simulation.log_every, 10);
        assert!(cfg.simulation.oracle);
        let again = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn rejects_large_step_and_missing_gain() {
        let text = SCALAR.replace("dt = 0.001", "dt = 0.01").replace("eta = 0.05", "");
        let ConfigError::Invalid(problems) = ExperimentConfig::parse(&text).unwrap_err() else {
            panic!("expected Invalid")
        };
        assert_eq!(problems.len(), 2, "{problems:?}");
    }

    #[test]
    fn mpc_block() {
        let text = SCALAR.replace("kind = \"projected_pd\"", "kind = \"mpc\"\nhorizon = 4.0\napply = 1.0\ndt = 0.5");
        let cfg = ExperimentConfig::parse(&text).unwrap();
        let ControllerBlock::Mpc(m) = cfg.controller else { panic!("expected mpc") };
        assert_eq!((m.horizon, m.apply, m.dt), (4.0, 1.0, 0.5));
        assert!(ExperimentConfig::parse(&SCALAR.replace("kind = \"projected_pd\"", "kind = \"mpc\"\nbogus = 1")).is_err());
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            ExperimentConfig::load(Path::new("/nonexistent/feedopt.toml")),
            Err(ConfigError::Io { .. })
        ));
    }
}
