//! Feedback controllers: the projected primal-dual flow, its discontinuous
//! comparison field, the unprojected equality-constrained flow, ALINEA and
//! receding-horizon MPC.

mod alinea;
mod mpc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use alinea::{AlineaController, AlineaRamp, AlineaTerm};
pub use mpc::{MpcConfig, MpcController, MpcPlan};

use crate::linalg;
use crate::problem::{project_orthant, ConstraintKind, TimeVaryingProblem};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid gain: {0}")]
    InvalidGain(String),
    #[error("one-sided limit did not settle (successive quotients differ by {spread:e})")]
    LimitNotSettled { spread: f64 },
    #[error("unknown link index {0}")]
    UnknownLink(usize),
    #[error("MPC QP did not converge: residual {residual:e} after {iterations} iterations")]
    QpNoConvergence { residual: f64, iterations: usize },
    #[error("MPC horizon is infeasible from the measured state: {0}")]
    InfeasibleHorizon(String),
    #[error("controller requires a problem with {0} constraints")]
    WrongKind(&'static str),
}

/// Time-scale and controller gains. Only the gains used by the selected
/// controller need to be set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerGains {
    pub epsilon: f64,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub eta_u: Option<f64>,
    #[serde(default)]
    pub eta_lambda: Option<f64>,
}

impl ControllerGains {
    pub fn projected(epsilon: f64, eta: f64) -> Self {
        Self { epsilon, eta: Some(eta), eta_u: None, eta_lambda: None }
    }

    pub fn equality(epsilon: f64, eta_u: f64, eta_lambda: f64) -> Self {
        Self { epsilon, eta: None, eta_u: Some(eta_u), eta_lambda: Some(eta_lambda) }
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        let ok = |v: Option<f64>| v.is_none_or(|g| g > 0.0 && g.is_finite());
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) || !ok(self.eta) || !ok(self.eta_u) || !ok(self.eta_lambda) {
            return Err(ControlError::InvalidGain(format!("all gains must be positive and finite: {self:?}")));
        }
        Ok(())
    }

    pub fn require_eta(&self) -> Result<f64, ControlError> {
        self.eta.ok_or_else(|| ControlError::InvalidGain("eta is required".into()))
    }

    pub fn require_equality(&self) -> Result<(f64, f64), ControlError> {
        match (self.eta_u, self.eta_lambda) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(ControlError::InvalidGain("eta_u and eta_lambda are required".into())),
        }
    }
}

/// Controller state `z = (u, λ)`, also used for its time derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub u: DVector<f64>,
    pub lambda: DVector<f64>,
}

impl ControllerState {
    pub fn new(u: DVector<f64>, lambda: DVector<f64>) -> Self {
        Self { u, lambda }
    }

    pub fn zeros(m: usize, r: usize) -> Self {
        Self { u: DVector::zeros(m), lambda: DVector::zeros(r) }
    }

    pub fn stacked(&self) -> DVector<f64> {
        linalg::concat(&self.u, &self.lambda)
    }

    pub fn from_stacked(z: &DVector<f64>, m: usize) -> Self {
        Self { u: z.rows(0, m).into_owned(), lambda: z.rows(m, z.len() - m).into_owned() }
    }

    pub fn axpy(&self, h: f64, d: &ControllerState) -> ControllerState {
        ControllerState { u: &self.u + &d.u * h, lambda: &self.lambda + &d.lambda * h }
    }
}

/// `u̇ = P_𝒰(u − ηL_u) − u`, `λ̇ = P_{≥0}(λ + ηL_λ) − λ`.
pub fn projected_pd_field(
    problem: &TimeVaryingProblem,
    z: &ControllerState,
    y: &DVector<f64>,
    t: f64,
    eta: f64,
) -> ControllerState {
    let (l_u, l_lambda) = problem.modified_gradients(&z.u, y, &z.lambda, t);
    ControllerState {
        u: problem.input_set().project(&(&z.u - &l_u * eta)) - &z.u,
        lambda: project_orthant(&(&z.lambda + &l_lambda * eta)) - &z.lambda,
    }
}

/// Default δ sequence for the one-sided limit.
pub const DEFAULT_DELTAS: [f64; 7] = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8];
/// Largest admissible spread between the last two difference quotients.
pub const LIMIT_TOL: f64 = 1e-4;

/// `lim_{δ→0⁺} (P_Ω(z + δF̂) − z)/δ` with drift `F̂ = η(−L_u, L_λ)`,
/// evaluated along a decreasing `deltas` sequence.
pub fn discontinuous_projected_field(
    problem: &TimeVaryingProblem,
    z: &ControllerState,
    y: &DVector<f64>,
    t: f64,
    eta: f64,
    deltas: &[f64],
) -> Result<ControllerState, ControlError> {
    if deltas.len() < 2 || deltas.windows(2).any(|w| w[1] >= w[0]) || deltas[deltas.len() - 1] <= 0.0 {
        return Err(ControlError::InvalidGain("deltas must be a decreasing positive sequence of length >= 2".into()));
    }
    let (l_u, l_lambda) = problem.modified_gradients(&z.u, y, &z.lambda, t);
    let drift = ControllerState { u: -l_u * eta, lambda: l_lambda * eta };
    let quotient = |delta: f64| {
        let moved = z.axpy(delta, &drift);
        ControllerState {
            u: (problem.input_set().project(&moved.u) - &z.u) / delta,
            lambda: (project_orthant(&moved.lambda) - &z.lambda) / delta,
        }
    };
    let mut prev = quotient(deltas[0]);
    let mut spread = f64::INFINITY;
    for &delta in &deltas[1..] {
        let next = quotient(delta);
        spread = (next.stacked() - prev.stacked()).amax();
        prev = next;
    }
    if spread > LIMIT_TOL {
        return Err(ControlError::LimitNotSettled { spread });
    }
    Ok(prev)
}

/// `u̇ = −η_u L_u`, `λ̇ = η_λ(K y − e)`.
pub fn equality_pd_field(
    problem: &TimeVaryingProblem,
    z: &ControllerState,
    y: &DVector<f64>,
    t: f64,
    eta_u: f64,
    eta_lambda: f64,
) -> ControllerState {
    let (l_u, l_lambda) = problem.modified_gradients(&z.u, y, &z.lambda, t);
    ControllerState { u: -l_u * eta_u, lambda: l_lambda * eta_lambda }
}

#[derive(Debug, Clone)]
pub enum Controller {
    /// Constant input, no controller dynamics.
    OpenLoop { u: DVector<f64> },
    ProjectedPd { eta: f64 },
    /// The discontinuous projected comparison dynamics.
    DiscontinuousPd { eta: f64, deltas: Vec<f64> },
    EqualityPd { eta_u: f64, eta_lambda: f64 },
    Alinea(AlineaController),
    Mpc(Box<MpcController>),
}

impl Controller {
    pub fn name(&self) -> &'static str {
        match self {
            Controller::OpenLoop { .. } => "open_loop",
            Controller::ProjectedPd { .. } => "projected_pd",
            Controller::DiscontinuousPd { .. } => "discontinuous_pd",
            Controller::EqualityPd { .. } => "equality_pd",
            Controller::Alinea(_) => "alinea",
            Controller::Mpc(_) => "mpc",
        }
    }

    /// Number of dual variables carried in the controller state.
    pub fn dual_dim(&self, problem: &TimeVaryingProblem) -> usize {
        match self {
            Controller::ProjectedPd { .. } | Controller::DiscontinuousPd { .. } | Controller::EqualityPd { .. } => {
                problem.r()
            }
            _ => 0,
        }
    }

    /// Whether the input set (and dual cone) must stay invariant.
    pub fn is_projected(&self) -> bool {
        matches!(self, Controller::ProjectedPd { .. } | Controller::DiscontinuousPd { .. })
    }

    pub fn check_problem(&self, problem: &TimeVaryingProblem) -> Result<(), ControlError> {
        match (self, problem.kind()) {
            (Controller::ProjectedPd { eta } | Controller::DiscontinuousPd { eta, .. }, ConstraintKind::Inequality) => {
                if *eta > 0.0 {
                    Ok(())
                } else {
                    Err(ControlError::InvalidGain(format!("eta must be positive, got {eta}")))
                }
            }
            (Controller::ProjectedPd { .. } | Controller::DiscontinuousPd { .. }, _) => {
                Err(ControlError::WrongKind("inequality"))
            }
            (Controller::EqualityPd { eta_u, eta_lambda }, ConstraintKind::Equality) => {
                if *eta_u > 0.0 && *eta_lambda > 0.0 {
                    Ok(())
                } else {
                    Err(ControlError::InvalidGain("eta_u and eta_lambda must be positive".into()))
                }
            }
            (Controller::EqualityPd { .. }, _) => Err(ControlError::WrongKind("equality")),
            (Controller::OpenLoop { u }, _) if u.len() != problem.m() => Err(ControlError::DimensionMismatch(
                format!("open-loop input has dimension {}, expected {}", u.len(), problem.m()),
            )),
            _ => Ok(()),
        }
    }

    /// Time derivative of the controller state for continuous-time
    /// controllers; `None` for sampled-data controllers (MPC).
    pub fn field(
        &self,
        problem: &TimeVaryingProblem,
        z: &ControllerState,
        y: &DVector<f64>,
        t: f64,
    ) -> Result<Option<ControllerState>, ControlError> {
        let d = match self {
            Controller::OpenLoop { .. } => ControllerState::zeros(z.u.len(), z.lambda.len()),
            Controller::ProjectedPd { eta } => projected_pd_field(problem, z, y, t, *eta),
            Controller::DiscontinuousPd { eta, deltas } => discontinuous_projected_field(problem, z, y, t, *eta, deltas)?,
            Controller::EqualityPd { eta_u, eta_lambda } => equality_pd_field(problem, z, y, t, *eta_u, *eta_lambda),
            Controller::Alinea(a) => ControllerState { u: a.vector_field(y)?, lambda: DVector::zeros(0) },
            Controller::Mpc(_) => return Ok(None),
        };
        Ok(Some(d))
    }
}
