//! Cell-transmission traffic networks, their free-flow linearization and
//! the ramp-metering problem.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controllers::{AlineaController, AlineaRamp, AlineaTerm};
use crate::plant::{LtiPlant, PlantDynamics, PlantError};
use crate::problem::{ConstraintKind, InputSet, OutputConstraint, ProblemError, QuadraticCost, TimeVaryingProblem};
use crate::signal::{DisturbanceSignal, VectorSignal};

/// Default weight of the `δ‖y‖²` term added to the throughput reward.
pub const DEFAULT_DELTA: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum TrafficError {
    #[error("invalid network:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error("negative density {value} on link {link}")]
    NegativeDensity { link: usize, value: f64 },
    #[error("negative inflow {value} on ramp {ramp}")]
    NegativeInput { ramp: usize, value: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("free-flow model: {0}")]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("cannot parse network: {0}")]
    Parse(#[from] toml::de::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkKind {
    OnRamp,
    OffRamp,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficLink {
    pub id: String,
    pub kind: LinkKind,
    /// `φ_i`
    pub free_flow_speed: f64,
    /// `β_i`
    pub backward_speed: f64,
    pub demand_max: f64,
    pub supply_max: f64,
    pub jam_density: f64,
}

impl TrafficLink {
    pub fn critical_demand(&self) -> f64 {
        self.demand_max / self.free_flow_speed
    }

    pub fn critical_supply(&self) -> f64 {
        self.jam_density - self.supply_max / self.backward_speed
    }

    /// `min{x^{crt,d}, x^{crt,s}}`
    pub fn ceiling(&self) -> f64 {
        self.critical_demand().min(self.critical_supply())
    }

    /// `d(x) = min{φx, d^max}`
    pub fn demand(&self, x: f64) -> f64 {
        (self.free_flow_speed * x).min(self.demand_max)
    }

    /// `s(x) = min{β(x^jam − x), s^max}`, floored at zero past jam.
    pub fn supply(&self, x: f64) -> f64 {
        (self.backward_speed * (self.jam_density - x)).min(self.supply_max).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
    pub ratio: f64,
}

/// On-disk network description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub links: Vec<TrafficLink>,
    #[serde(default)]
    pub edges: Vec<Edge>,
    /// Ids of metered on-ramps, in input order.
    pub controllable: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficNetwork {
    links: Vec<TrafficLink>,
    /// `R = [r_ij]`
    routing: DMatrix<f64>,
    successors: Vec<Vec<usize>>,
    predecessors: Vec<Vec<usize>>,
    controllable: Vec<usize>,
    config: NetworkConfig,
}

impl TrafficNetwork {
    /// Validates `config`, reporting every problem at once.
    pub fn new(config: NetworkConfig) -> Result<Self, TrafficError> {
        let mut problems = Vec::new();
        let n = config.links.len();
        if n == 0 {
            problems.push("network has no links".to_string());
        }
        let mut index = HashMap::new();
        for (i, l) in config.links.iter().enumerate() {
            if index.insert(l.id.clone(), i).is_some() {
                problems.push(format!("duplicate link id '{}'", l.id));
            }
            for (name, v) in [
                ("free_flow_speed", l.free_flow_speed),
                ("backward_speed", l.backward_speed),
                ("demand_max", l.demand_max),
                ("supply_max", l.supply_max),
                ("jam_density", l.jam_density),
            ] {
                if !(v > 0.0 && v.is_finite()) {
                    problems.push(format!("link '{}': {name} must be positive, got {v}", l.id));
                }
            }
            if l.critical_demand() > l.jam_density {
                problems.push(format!(
                    "link '{}': critical demand density {} exceeds jam density {}",
                    l.id,
                    l.critical_demand(),
                    l.jam_density
                ));
            }
            if l.critical_supply() <= 0.0 {
                problems.push(format!("link '{}': critical supply density {} is not positive", l.id, l.critical_supply()));
            }
        }
        let mut routing = DMatrix::zeros(n, n);
        let mut successors = vec![Vec::new(); n];
        let mut predecessors = vec![Vec::new(); n];
        for e in &config.edges {
            let (Some(&i), Some(&j)) = (index.get(&e.from), index.get(&e.to)) else {
                problems.push(format!("edge {} -> {} references an unknown link", e.from, e.to));
                continue;
            };
            if !(0.0..=1.0).contains(&e.ratio) {
                problems.push(format!("edge {} -> {}: ratio {} outside [0, 1]", e.from, e.to, e.ratio));
            }
            if i == j {
                problems.push(format!("edge {} -> {} is a self-loop", e.from, e.to));
            }
            if successors[i].contains(&j) {
                problems.push(format!("duplicate edge {} -> {}", e.from, e.to));
                continue;
            }
            match (config.links[i].kind, config.links[j].kind) {
                (LinkKind::OffRamp, _) => problems.push(format!("off-ramp '{}' cannot have successors", e.from)),
                (_, LinkKind::OnRamp) => problems.push(format!("on-ramp '{}' cannot have predecessors", e.to)),
                _ => {}
            }
            routing[(i, j)] = e.ratio;
            if e.ratio > 0.0 {
                successors[i].push(j);
                predecessors[j].push(i);
            }
        }
        for (i, succ) in successors.iter().enumerate() {
            if !succ.is_empty() {
                let sum: f64 = routing.row(i).sum();
                if (sum - 1.0).abs() > 1e-9 {
                    problems.push(format!("routing ratios out of '{}' sum to {sum}, expected 1", config.links[i].id));
                }
            }
        }
        let mut controllable = Vec::new();
        for id in &config.controllable {
            match index.get(id) {
                Some(&i) if config.links[i].kind == LinkKind::OnRamp => {
                    if controllable.contains(&i) {
                        problems.push(format!("ramp '{id}' listed twice as controllable"));
                    }
                    controllable.push(i);
                }
                Some(_) => problems.push(format!("controllable link '{id}' is not an on-ramp")),
                None => problems.push(format!("controllable link '{id}' does not exist")),
            }
        }
        if config.controllable.is_empty() {
            problems.push("no controllable ramps".to_string());
        }
        if !problems.is_empty() {
            return Err(TrafficError::Invalid(problems));
        }
        Ok(Self { links: config.links.clone(), routing, successors, predecessors, controllable, config })
    }

    pub fn from_toml_str(s: &str) -> Result<Self, TrafficError> {
        Self::new(toml::from_str(s)?)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn links(&self) -> &[TrafficLink] {
        &self.links
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn ramp_count(&self) -> usize {
        self.controllable.len()
    }

    pub fn routing(&self) -> &DMatrix<f64> {
        &self.routing
    }

    pub fn successors(&self, i: usize) -> &[usize] {
        &self.successors[i]
    }

    pub fn predecessors(&self, i: usize) -> &[usize] {
        &self.predecessors[i]
    }

    /// Link indices of the metered ramps, in input order.
    pub fn controllable(&self) -> &[usize] {
        &self.controllable
    }

    pub fn off_ramps(&self) -> Vec<usize> {
        (0..self.links.len()).filter(|&i| self.links[i].kind == LinkKind::OffRamp).collect()
    }

    pub fn ceilings(&self) -> DVector<f64> {
        DVector::from_iterator(self.links.len(), self.links.iter().map(TrafficLink::ceiling))
    }

    fn check_state(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(), TrafficError> {
        if x.len() != self.links.len() || u.len() != self.controllable.len() {
            return Err(TrafficError::DimensionMismatch(format!(
                "expected {} densities and {} inflows, got {} and {}",
                self.links.len(),
                self.controllable.len(),
                x.len(),
                u.len()
            )));
        }
        if let Some((link, &value)) = x.iter().enumerate().find(|(_, v)| **v < 0.0) {
            return Err(TrafficError::NegativeDensity { link, value });
        }
        if let Some((ramp, &value)) = u.iter().enumerate().find(|(_, v)| **v < 0.0) {
            return Err(TrafficError::NegativeInput { ramp, value });
        }
        Ok(())
    }

    /// FIFO outflow of every link.
    pub fn outflows(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.links.len(), |i, _| {
            let d = self.links[i].demand(x[i]);
            self.successors[i]
                .iter()
                .map(|&j| self.links[j].supply(x[j]) / self.routing[(i, j)])
                .fold(d, f64::min)
        })
    }

    /// Flow leaving the network from links without successors.
    pub fn exit_flow(&self, x: &DVector<f64>) -> f64 {
        let f = self.outflows(x);
        (0..self.links.len()).filter(|&i| self.successors[i].is_empty()).map(|i| f[i]).sum()
    }

    /// `B`: column `k` selects the `k`-th metered ramp.
    pub fn input_matrix(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.links.len(), self.controllable.len());
        for (k, &i) in self.controllable.iter().enumerate() {
            b[(i, k)] = 1.0;
        }
        b
    }
}

/// `ẋ_i = f_in_i − f_out_i` with routing-weighted inflows; unmetered
/// on-ramps receive no inflow.
pub fn ctm_vector_field(net: &TrafficNetwork, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, TrafficError> {
    net.check_state(x, u)?;
    let f_out = net.outflows(x);
    let mut dx = -&f_out;
    for i in 0..net.links.len() {
        for &j in &net.predecessors[i] {
            dx[i] += net.routing[(j, i)] * f_out[j];
        }
    }
    dx += net.input_matrix() * u;
    Ok(dx)
}

/// `Φ(x) = Σ_{off-ramps} min{φ_i x_i, d_i^max}`.
pub fn throughput(net: &TrafficNetwork, x: &DVector<f64>) -> f64 {
    net.off_ramps().into_iter().map(|i| net.links[i].demand(x[i].max(0.0))).sum()
}

/// `ẋ = (Rᵀ − I)F x + B u`, `y = x + w`.
pub fn freeflow_linearization(net: &TrafficNetwork) -> Result<LtiPlant, TrafficError> {
    let n = net.links.len();
    let f = DMatrix::from_diagonal(&DVector::from_iterator(n, net.links.iter().map(|l| l.free_flow_speed)));
    let a = (net.routing.transpose() - DMatrix::identity(n, n)) * f;
    let plant = LtiPlant::new(a, net.input_matrix(), DMatrix::identity(n, n), DMatrix::identity(n, n), DMatrix::zeros(n, n))?;
    plant.check_stability(None)?;
    Ok(plant)
}

/// CTM as a plant; negative densities and inflows are clamped to zero.
#[derive(Debug, Clone)]
pub struct CtmPlant {
    pub network: Arc<TrafficNetwork>,
}

impl PlantDynamics for CtmPlant {
    fn state_dim(&self) -> usize {
        self.network.link_count()
    }

    fn input_dim(&self) -> usize {
        self.network.ramp_count()
    }

    fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>, _w: &DVector<f64>) -> DVector<f64> {
        let x = x.map(|v| v.max(0.0));
        let u = u.map(|v| v.max(0.0));
        ctm_vector_field(&self.network, &x, &u).expect("clamped state is admissible")
    }

    fn output(&self, x: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        x + w
    }
}

/// `φ(u) = (u − u_ref)ᵀQ_u(u − u_ref)`, `ψ(y) = −Σ_{off} φ_i y_i + δ‖y‖²`,
/// `y ≤ c·min{x^{crt,d}, x^{crt,s}}` with `c = ceiling_fraction`, `u ≥ 0`.
pub fn build_metering_problem(
    net: &TrafficNetwork,
    u_ref: &DVector<f64>,
    q_u: &DMatrix<f64>,
    delta: f64,
    nu: f64,
    ceiling_fraction: f64,
    noise: DisturbanceSignal,
) -> Result<TimeVaryingProblem, TrafficError> {
    let (n, m) = (net.link_count(), net.ramp_count());
    if u_ref.len() != m || q_u.shape() != (m, m) || noise.dim() != n {
        return Err(TrafficError::DimensionMismatch(format!(
            "u_ref {}, Q_u {:?} and noise {} do not fit {m} ramps and {n} links",
            u_ref.len(),
            q_u.shape(),
            noise.dim()
        )));
    }
    let mut problems = Vec::new();
    if u_ref.iter().any(|v| *v < 0.0) {
        problems.push("u_ref must be nonnegative".to_string());
    }
    if !(delta > 0.0) {
        problems.push(format!("delta must be positive, got {delta}"));
    }
    if !(ceiling_fraction > 0.0 && ceiling_fraction <= 1.0) {
        problems.push(format!("ceiling_fraction must lie in (0, 1], got {ceiling_fraction}"));
    }
    if !problems.is_empty() {
        return Err(TrafficError::Invalid(problems));
    }
    let plant = freeflow_linearization(net)?;
    let mut reward = DVector::zeros(n);
    for i in net.off_ramps() {
        reward[i] = -net.links[i].free_flow_speed;
    }
    let cost = QuadraticCost::new(
        q_u * 2.0,
        VectorSignal::constant(u_ref.as_slice()),
        DMatrix::identity(n, n) * (2.0 * delta),
        VectorSignal::zeros(n),
        VectorSignal::constant(reward.as_slice()),
    )?;
    let constraint = OutputConstraint::constant(
        ConstraintKind::Inequality,
        DMatrix::identity(n, n),
        VectorSignal::constant((net.ceilings() * ceiling_fraction).as_slice()),
    )?;
    Ok(TimeVaryingProblem::new(
        Arc::new(cost),
        constraint,
        InputSet::NonnegOrthant { dim: m },
        nu,
        plant.steady_state_map()?,
        noise,
    )?)
}

/// ALINEA on every metered ramp, regulating each immediate downstream
/// link to `ceiling_fraction` of its ceiling. Rates are bounded by `demand`.
pub fn alinea_controller(
    net: &TrafficNetwork,
    gain: f64,
    ceiling_fraction: f64,
    demand: &DVector<f64>,
) -> Result<AlineaController, TrafficError> {
    if demand.len() != net.ramp_count() {
        return Err(TrafficError::DimensionMismatch(format!(
            "demand has {} entries, expected {}",
            demand.len(),
            net.ramp_count()
        )));
    }
    let ramps = net
        .controllable
        .iter()
        .map(|&i| AlineaRamp {
            downstream: net.successors[i]
                .iter()
                .map(|&j| AlineaTerm { link: j, gain, setpoint: ceiling_fraction * net.links[j].ceiling() })
                .collect(),
        })
        .collect();
    Ok(AlineaController::new(ramps).with_upper_bounds(demand.iter().copied().collect()))
}

/// The seven-link network shipped with the crate.
pub const EXAMPLE_NETWORK: &str = include_str!("../data/example_network.toml");

pub fn example_network() -> TrafficNetwork {
    TrafficNetwork::from_toml_str(EXAMPLE_NETWORK).expect("shipped network is valid")
}
