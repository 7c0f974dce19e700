//! Builds closed-loop scenarios from configs, runs them and compares
//! controllers.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::certificates::{certify_equality, certify_inequality, Certificate};
use crate::config::{ControllerBlock, ExperimentConfig, NetworkBlock, PlantBlock, ProblemBlock, Rows};
use crate::controllers::{Controller, ControllerState, MpcController, DEFAULT_DELTAS};
use crate::linalg;
use crate::par;
use crate::plant::{LtiPlant, PlantDynamics, StabilityCertificate};
use crate::problem::{ConstraintKind, InputSet, OutputConstraint, QuadraticCost, TimeVaryingProblem};
use crate::signal::{DisturbanceSignal, ScalarSignal, VectorSignal};
use crate::simulator::{lyapunov_diagnostics, tracking_report, Simulation, TrackingReport, TrajectoryLog};
use crate::traffic::{self, alinea_controller, build_metering_problem, CtmPlant, TrafficNetwork};
use crate::Error;

/// A config turned into plant, problem, controller and initial state.
pub struct Scenario {
    pub config: ExperimentConfig,
    /// The plant, or the free-flow model of the network.
    pub lti: LtiPlant,
    pub stability: Option<StabilityCertificate>,
    pub network: Option<Arc<TrafficNetwork>>,
    pub problem: TimeVaryingProblem,
    pub controller: Controller,
    pub x0: DVector<f64>,
    pub z0: ControllerState,
}

fn matrix(name: &str, rows: &Rows) -> Result<DMatrix<f64>, Error> {
    linalg::matrix_from_rows(rows).ok_or_else(|| Error::invalid(format!("{name} has rows of unequal length")))
}

fn signals(v: &[ScalarSignal]) -> VectorSignal {
    VectorSignal::Components(v.to_vec())
}

fn build_plant(block: &PlantBlock) -> Result<(LtiPlant, StabilityCertificate), Error> {
    let a = matrix("a", &block.a)?;
    let c = matrix("c", &block.c)?;
    let e = matrix("e", &block.e)?;
    let d = match &block.d {
        Some(d) => matrix("d", d)?,
        None => DMatrix::zeros(c.nrows(), e.ncols()),
    };
    let plant = LtiPlant::new(a, matrix("b", &block.b)?, c, d, e)?;
    let q_x = block.q_x.as_ref().map(|q| matrix("q_x", q)).transpose()?;
    let stab = plant.check_stability(q_x.as_ref())?;
    Ok((plant, stab))
}

fn build_problem(block: &ProblemBlock, plant: &LtiPlant) -> Result<TimeVaryingProblem, Error> {
    let (m, p, q) = (plant.m(), plant.p(), plant.q());
    let cost = &block.cost;
    let zeros = |n: usize| VectorSignal::zeros(n);
    let cost = QuadraticCost::new(
        matrix("q_u", &cost.q_u)?,
        signals(&cost.r_u),
        cost.q_y.as_ref().map(|r| matrix("q_y", r)).transpose()?.unwrap_or_else(|| DMatrix::zeros(p, p)),
        cost.r_y.as_deref().map_or_else(|| zeros(p), signals),
        cost.c.as_deref().map_or_else(|| zeros(p), signals),
    )?;
    let constraint = OutputConstraint::constant(block.kind, matrix("k", &block.constraint.k)?, signals(&block.constraint.e))?;
    let disturbance = DisturbanceSignal::new(block.disturbance.as_deref().map_or_else(|| zeros(q), signals));
    Ok(TimeVaryingProblem::new(
        Arc::new(cost),
        constraint,
        block.input_set.clone().unwrap_or(InputSet::FullSpace { dim: m }),
        block.nu,
        plant.steady_state_map()?,
        disturbance,
    )?)
}

fn load_network(block: &NetworkBlock, base: &Path) -> Result<TrafficNetwork, Error> {
    match (&block.builtin, &block.path) {
        (Some(_), _) => Ok(traffic::example_network()),
        (None, Some(path)) => {
            let path = base.join(path);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Error::invalid(format!("cannot read network {}: {e}", path.display())))?;
            Ok(TrafficNetwork::from_toml_str(&text)?)
        }
        (None, None) => Err(Error::invalid("[network] needs path or builtin")),
    }
}

fn build_network_problem(
    block: &NetworkBlock,
    net: &TrafficNetwork,
    seed: u64,
    t_end: f64,
) -> Result<TimeVaryingProblem, Error> {
    let m = net.ramp_count();
    let q_u = match &block.q_u {
        Some(rows) => matrix("q_u", rows)?,
        None => DMatrix::identity(m, m),
    };
    let noise = match &block.noise {
        Some(n) if n.amplitude > 0.0 => DisturbanceSignal::new(VectorSignal::random_piecewise_linear(
            net.link_count(),
            n.amplitude,
            n.knot_spacing,
            t_end,
            n.seed.unwrap_or(seed),
        )),
        _ => DisturbanceSignal::zeros(net.link_count()),
    };
    let u_ref = DVector::from_column_slice(&block.u_ref);
    Ok(build_metering_problem(net, &u_ref, &q_u, block.delta, block.nu, block.ceiling_fraction, noise)?)
}

fn vector(name: &str, v: &Option<Vec<f64>>, dim: usize) -> Result<DVector<f64>, Error> {
    match v {
        None => Ok(DVector::zeros(dim)),
        Some(v) if v.len() == dim => Ok(DVector::from_column_slice(v)),
        Some(v) => Err(Error::invalid(format!("{name} has {} entries, expected {dim}", v.len()))),
    }
}

impl Scenario {
    pub fn build(config: &ExperimentConfig) -> Result<Self, Error> {
        config.validate()?;
        let [t0, t1] = config.simulation.t_span;
        let (lti, stability, network, problem) = match (&config.plant, &config.network) {
            (Some(pb), _) => {
                let (plant, stab) = build_plant(pb)?;
                let problem = build_problem(config.problem.as_ref().expect("validated"), &plant)?;
                (plant, Some(stab), None, problem)
            }
            (None, Some(nb)) => {
                let net = load_network(nb, &config.base_dir)?;
                let lti = traffic::freeflow_linearization(&net)?;
                let stab = lti.check_stability(None)?;
                let problem = build_network_problem(nb, &net, config.seed, t1)?;
                (lti, Some(stab), Some(Arc::new(net)), problem)
            }
            (None, None) => return Err(Error::invalid("one of [plant] or [network] is required")),
        };
        let gains = &config.gains;
        let controller = match &config.controller {
            ControllerBlock::OpenLoop { u } => Controller::OpenLoop { u: DVector::from_column_slice(u) },
            ControllerBlock::ProjectedPd => Controller::ProjectedPd { eta: gains.require_eta()? },
            ControllerBlock::DiscontinuousPd { deltas } => Controller::DiscontinuousPd {
                eta: gains.require_eta()?,
                deltas: deltas.clone().unwrap_or_else(|| DEFAULT_DELTAS.to_vec()),
            },
            ControllerBlock::EqualityPd => {
                let (eta_u, eta_lambda) = gains.require_equality()?;
                Controller::EqualityPd { eta_u, eta_lambda }
            }
            ControllerBlock::Alinea { gain } => {
                let (net, nb) = network.as_ref().zip(config.network.as_ref()).expect("validated");
                let demand = DVector::from_column_slice(&nb.u_ref);
                Controller::Alinea(alinea_controller(net, *gain, nb.ceiling_fraction, &demand)?)
            }
            ControllerBlock::Mpc(mc) => {
                // The model runs on the plant time scale.
                let model = LtiPlant::new(
                    lti.a() / gains.epsilon,
                    lti.b() / gains.epsilon,
                    lti.c().clone(),
                    lti.d().clone(),
                    lti.e() / gains.epsilon,
                )?;
                Controller::Mpc(Box::new(MpcController::new(&model, &problem, *mc)?))
            }
        };
        controller.check_problem(&problem)?;
        let sim = &config.simulation;
        let u0 = match (&sim.u0, &controller) {
            (None, Controller::OpenLoop { u }) => u.clone(),
            (u0, _) => vector("u0", u0, problem.m())?,
        };
        let lambda0 = vector("lambda0", &sim.lambda0, controller.dual_dim(&problem))?;
        let x0 = match &sim.x0 {
            Some(_) => vector("x0", &sim.x0, lti.n())?,
            None => problem.map().equilibrium_state(&u0, &problem.w(t0)),
        };
        Ok(Self {
            config: config.clone(),
            lti,
            stability,
            network,
            problem,
            controller,
            x0,
            z0: ControllerState::new(u0, lambda0),
        })
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    /// Certificate for the configured gains; `Err` explains why none applies.
    pub fn certify(&self) -> Result<Certificate, Error> {
        let g = &self.config.gains;
        match (&self.controller, self.problem.kind()) {
            (Controller::ProjectedPd { eta } | Controller::DiscontinuousPd { eta, .. }, ConstraintKind::Inequality) => {
                Ok(Certificate::Inequality(certify_inequality(&self.lti, self.stability.as_ref(), &self.problem, *eta, g.epsilon)?))
            }
            (Controller::EqualityPd { eta_u, eta_lambda }, ConstraintKind::Equality) => Ok(Certificate::Equality(
                certify_equality(&self.lti, self.stability.as_ref(), &self.problem, *eta_u, *eta_lambda, g.epsilon)?,
            )),
            (c, _) => Err(Error::invalid(format!("no certificate applies to controller {}", c.name()))),
        }
    }

    pub fn simulate(&self, certificate: Option<Certificate>) -> Result<TrajectoryLog, Error> {
        let sim = &self.config.simulation;
        let ctm;
        let builder = if sim.reduced {
            Simulation::reduced(&self.problem, &self.controller)
        } else if let Some(net) = &self.network {
            ctm = CtmPlant { network: net.clone() };
            Simulation::new(&ctm as &dyn PlantDynamics, &self.problem, &self.controller, self.config.gains.epsilon)
        } else {
            Simulation::new(&self.lti, &self.problem, &self.controller, self.config.gains.epsilon)
        };
        let oracle = sim.oracle.then(Default::default);
        Ok(builder
            .dt(sim.dt)
            .log_every(sim.log_every)
            .oracle(oracle)
            .certificate(certificate)
            .clamp_inputs(self.network.is_some())
            .run(&self.x0, &self.z0, (sim.t_span[0], sim.t_span[1]))?)
    }
}

/// Throughput and constraint metrics over a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    /// Time-averaged throughput; networks only.
    pub mean_throughput: Option<f64>,
    /// `max_t ‖(K y − e)₊‖` (inequality) or `max_t ‖K y − e‖` (equality).
    pub max_violation: f64,
    pub violation_integral: f64,
    /// Largest violation after the transient window.
    pub post_transient_violation: f64,
    /// `sup_t ‖e_t‖` over the log.
    pub bound_norm: f64,
    pub controller_time: f64,
    pub wall_time: f64,
    pub invariance_defect: f64,
    pub mpc_softened: usize,
}

fn trapezoid(t: &[f64], v: &[f64]) -> f64 {
    t.windows(2).zip(v.windows(2)).map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1])).sum()
}

pub fn run_metrics(log: &TrajectoryLog, problem: &TimeVaryingProblem, network: Option<&TrafficNetwork>, transient: f64) -> RunMetrics {
    let t = log.times();
    let c = problem.constraint();
    let viol: Vec<f64> = log
        .records
        .iter()
        .map(|r| {
            let g = c.k(r.t) * &r.y - c.e(r.t);
            match c.kind() {
                ConstraintKind::Inequality => g.map(|v| v.max(0.0)).norm(),
                ConstraintKind::Equality => g.norm(),
            }
        })
        .collect();
    let mean_throughput = network.map(|net| {
        let phi: Vec<f64> = log.records.iter().map(|r| traffic::throughput(net, &r.x)).collect();
        let span = t.last().copied().unwrap_or(0.0) - t.first().copied().unwrap_or(0.0);
        if span > 0.0 {
            trapezoid(&t, &phi) / span
        } else {
            phi.first().copied().unwrap_or(0.0)
        }
    });
    RunMetrics {
        mean_throughput,
        max_violation: viol.iter().copied().fold(0.0, f64::max),
        violation_integral: trapezoid(&t, &viol),
        post_transient_violation: t.iter().zip(&viol).filter(|(t, _)| **t >= transient).map(|(_, v)| *v).fold(0.0, f64::max),
        bound_norm: t.iter().map(|&s| c.e(s).norm()).fold(0.0, f64::max),
        controller_time: log.controller_time,
        wall_time: log.wall_time,
        invariance_defect: log.invariance_defect,
        mpc_softened: log.mpc_softened,
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub name: String,
    pub controller: String,
    pub certificate: Option<Certificate>,
    /// Why no certificate is attached, if none is.
    pub certificate_note: Option<String>,
    pub log: TrajectoryLog,
    pub tracking: TrackingReport,
    pub lyapunov_flags: Option<usize>,
    pub metrics: RunMetrics,
}

#[derive(Serialize)]
struct ReportFile<'a> {
    name: &'a str,
    controller: &'a str,
    certificate_note: Option<&'a str>,
    tracking: TrackingRecord,
    metrics: &'a RunMetrics,
    lyapunov_flags: Option<usize>,
}

#[derive(Serialize)]
struct TrackingRecord {
    max_violation: f64,
    envelope_violations: usize,
    asymptotic_error: f64,
    initial_error: f64,
    final_error: f64,
    decay_rate: Option<f64>,
    fit_error: Option<String>,
    residual_radius: f64,
    sup_zstar_rate: f64,
    sup_w_rate: f64,
}

impl RunOutcome {
    /// Machine-readable report. Timing fields vary between runs.
    pub fn report_toml(&self) -> String {
        let t = &self.tracking;
        let nan_free = |v: f64| if v.is_finite() { v } else { f64::NAN };
        let rec = ReportFile {
            name: &self.name,
            controller: &self.controller,
            certificate_note: self.certificate_note.as_deref(),
            tracking: TrackingRecord {
                max_violation: nan_free(t.max_violation),
                envelope_violations: t.violations,
                asymptotic_error: t.asymptotic_error,
                initial_error: t.initial_error,
                final_error: t.final_error,
                decay_rate: t.decay_rate,
                fit_error: t.fit_error.clone(),
                residual_radius: t.residual_radius,
                sup_zstar_rate: t.sup_zstar_rate,
                sup_w_rate: t.sup_w_rate,
            },
            metrics: &self.metrics,
            lyapunov_flags: self.lyapunov_flags,
        };
        toml::to_string(&rec).expect("report serializes")
    }

    /// Writes `trajectory.csv`, `report.toml` and, when present,
    /// `certificate.toml` into `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let csv = dir.join("trajectory.csv");
        self.log.write_csv(&csv)?;
        written.push(csv);
        let report = dir.join("report.toml");
        std::fs::write(&report, self.report_toml())?;
        written.push(report);
        if let Some(c) = &self.certificate {
            let path = dir.join("certificate.toml");
            std::fs::write(&path, c.to_toml())?;
            written.push(path);
        }
        Ok(written)
    }
}

impl Scenario {
    pub fn run(&self) -> Result<RunOutcome, Error> {
        let (certificate, certificate_note) = if self.config.simulation.certify {
            match self.certify() {
                Ok(c) if c.pass() => (Some(c), None),
                Ok(c) => {
                    let note = format!("certificate conditions fail: epsilon = {:e} >= epsilon_max = {:e}", self.config.gains.epsilon, c.epsilon_max());
                    log::warn!("{}: {note}", self.name());
                    (Some(c), Some(note))
                }
                Err(e) => (None, Some(e.to_string())),
            }
        } else {
            (None, Some("certification disabled".into()))
        };
        let log = self.simulate(certificate.clone())?;
        let tracking = tracking_report(&log, certificate.as_ref());
        let lyapunov_flags = certificate
            .as_ref()
            .filter(|_| !log.oracle.is_empty())
            .map(|c| lyapunov_diagnostics(&log, &self.problem, c).flagged.len());
        let [t0, t1] = self.config.simulation.t_span;
        let transient = self.config.simulation.transient.unwrap_or(t0 + 0.25 * (t1 - t0));
        let metrics = run_metrics(&log, &self.problem, self.network.as_deref(), transient);
        Ok(RunOutcome {
            name: self.config.name.clone(),
            controller: self.controller.name().to_string(),
            certificate,
            certificate_note,
            log,
            tracking,
            lyapunov_flags,
            metrics,
        })
    }
}

/// Builds and runs one config.
pub fn run(config: &ExperimentConfig) -> Result<RunOutcome, Error> {
    Scenario::build(config)?.run()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub name: String,
    pub controller: String,
    pub mean_throughput: Option<f64>,
    pub max_violation: f64,
    pub violation_integral: f64,
    pub post_transient_violation: f64,
    pub controller_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn row(&self, controller: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.controller == controller)
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("name,controller,mean_throughput,max_violation,violation_integral,post_transient_violation,controller_time\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                r.name,
                r.controller,
                r.mean_throughput.unwrap_or(f64::NAN),
                r.max_violation,
                r.violation_integral,
                r.post_transient_violation,
                r.controller_time
            ));
        }
        out
    }
}

impl fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(8);
        writeln!(
            f,
            "{:<w$} {:<14} {:>14} {:>14} {:>14} {:>14} {:>12}",
            "scenario", "controller", "throughput", "max viol", "viol integral", "post viol", "ctrl time s"
        )?;
        for r in &self.rows {
            let thr = r.mean_throughput.map_or("-".to_string(), |v| format!("{v:.6}"));
            writeln!(
                f,
                "{:<w$} {:<14} {:>14} {:>14.6e} {:>14.6e} {:>14.6e} {:>12.4}",
                r.name, r.controller, thr, r.max_violation, r.violation_integral, r.post_transient_violation, r.controller_time
            )?;
        }
        Ok(())
    }
}

fn check_compatible(configs: &[ExperimentConfig]) -> Result<(), Error> {
    let Some(first) = configs.first() else {
        return Err(Error::IncompatibleScenarios("no scenarios given".into()));
    };
    let networks: Vec<Option<TrafficNetwork>> = configs
        .iter()
        .map(|c| c.network.as_ref().map(|nb| load_network(nb, &c.base_dir)).transpose())
        .collect::<Result<_, _>>()?;
    let mut problems = Vec::new();
    for (c, net) in configs.iter().zip(&networks).skip(1) {
        if c.simulation.t_span != first.simulation.t_span {
            problems.push(format!("'{}' simulates {:?}, '{}' simulates {:?}", c.name, c.simulation.t_span, first.name, first.simulation.t_span));
        }
        if net != &networks[0] {
            problems.push(format!("'{}' and '{}' use different networks", c.name, first.name));
        }
        if net.is_none() && c.plant != first.plant {
            problems.push(format!("'{}' and '{}' use different plants", c.name, first.name));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::IncompatibleScenarios(problems.join("; ")))
    }
}

/// Runs every scenario (in parallel) and tabulates the metrics.
pub fn compare(configs: &[ExperimentConfig]) -> Result<(ComparisonTable, Vec<RunOutcome>), Error> {
    check_compatible(configs)?;
    let outcomes: Vec<RunOutcome> = par::map(configs, run).into_iter().collect::<Result<_, _>>()?;
    let rows = outcomes
        .iter()
        .map(|o| ComparisonRow {
            name: o.name.clone(),
            controller: o.controller.clone(),
            mean_throughput: o.metrics.mean_throughput,
            max_violation: o.metrics.max_violation,
            violation_integral: o.metrics.violation_integral,
            post_transient_violation: o.metrics.post_transient_violation,
            controller_time: o.metrics.controller_time,
        })
        .collect();
    Ok((ComparisonTable { rows }, outcomes))
}
