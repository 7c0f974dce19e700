//! Online projected primal-dual feedback controllers for LTI plants,
//! their stability certificates, a closed-loop simulator and a
//! ramp-metering case study.

// Negated float comparisons reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certificates;
pub mod config;
pub mod controllers;
pub mod linalg;
pub mod par;
pub mod plant;
pub mod presets;
pub mod problem;
pub mod scenario;
pub mod signal;
pub mod simulator;
pub mod traffic;

use thiserror::Error;

pub use certificates::{Certificate, CertificateError};
pub use config::{ConfigError, ExperimentConfig};
pub use controllers::{ControlError, Controller, ControllerGains, ControllerState};
pub use plant::{LtiPlant, PlantError, SteadyStateMap};
pub use problem::{ProblemError, TimeVaryingProblem};
pub use simulator::{SimError, Simulation, TrajectoryLog};
pub use traffic::{TrafficError, TrafficNetwork};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Certificate(#[from] CertificateError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Traffic(#[from] TrafficError),
    #[error("incompatible scenarios: {0}")]
    IncompatibleScenarios(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Config(ConfigError::Invalid(vec![msg.into()]))
    }
}
