//! Fixed-step closed-loop integration, trajectory logs and tracking
//! diagnostics.

use std::fmt::Write as _;
use std::io;
use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use thiserror::Error;

use crate::certificates::Certificate;
use crate::controllers::{ControlError, Controller, ControllerGains, ControllerState};
use crate::linalg;
use crate::plant::PlantDynamics;
use crate::problem::{project_orthant, ProblemError, SaddlePoint, SolveOptions, TimeVaryingProblem};

/// States with a norm above this are treated as divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e12;
/// Distance below which the controller state counts as inside `Ω`.
pub const ENTRY_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("dt = {dt} exceeds epsilon/10 = {limit}")]
    StepTooLarge { dt: f64, limit: f64 },
    #[error("state diverged at t = {t}: {detail}")]
    NonFiniteState { t: f64, detail: String },
    #[error("invalid time span: {0}")]
    InvalidSpan(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// `ξ = (x, u, λ)` at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopState {
    pub t: f64,
    pub x: DVector<f64>,
    pub z: ControllerState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub t: f64,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub lambda: DVector<f64>,
    pub y: DVector<f64>,
    pub w: DVector<f64>,
    /// `‖ξ̃_ν(t)‖`; NaN without an oracle.
    pub err: f64,
    /// NaN without a passing certificate.
    pub envelope: f64,
    pub v: f64,
    pub w_lyap: f64,
    pub u_lyap: f64,
}

#[derive(Debug, Clone)]
pub struct TrajectoryLog {
    pub controller: String,
    pub epsilon: f64,
    pub dt: f64,
    pub log_period: f64,
    pub records: Vec<LogRecord>,
    /// Oracle saddle points on the log grid; empty when the oracle is off.
    pub oracle: Vec<SaddlePoint>,
    pub certificate: Option<Certificate>,
    /// Largest finite-difference `‖ż★_ν‖` over the log grid.
    pub sup_zstar_rate: f64,
    /// `sup‖ẇ‖` over the simulated window.
    pub sup_w_rate: f64,
    /// Largest distance of the controller state from `Ω` before the
    /// post-step projection, after entry.
    pub invariance_defect: f64,
    pub mpc_solves: usize,
    pub mpc_softened: usize,
    /// Seconds spent evaluating the controller.
    pub controller_time: f64,
    pub wall_time: f64,
}

impl TrajectoryLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.t).collect()
    }

    pub fn last(&self) -> Option<&LogRecord> {
        self.records.last()
    }

    pub fn header(&self) -> String {
        let first = self.records.first();
        let dims = |f: fn(&LogRecord) -> usize| first.map_or(0, f);
        let mut cols = vec!["t".to_string()];
        for (name, n) in [
            ("x", dims(|r| r.x.len())),
            ("u", dims(|r| r.u.len())),
            ("lambda", dims(|r| r.lambda.len())),
            ("y", dims(|r| r.y.len())),
        ] {
            cols.extend((1..=n).map(|i| format!("{name}_{i}")));
        }
        cols.extend(["err", "envelope", "V", "W", "U"].map(String::from));
        cols.join(",")
    }

    /// CSV with a `#` comment block documenting every column.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# controller: {}", self.controller);
        let _ = writeln!(out, "# epsilon: {:e}  dt: {:e}  log_period: {:e}", self.epsilon, self.dt, self.log_period);
        let _ = writeln!(out, "# t: time");
        let _ = writeln!(out, "# x_i: plant state");
        let _ = writeln!(out, "# u_i: applied input");
        let _ = writeln!(out, "# lambda_i: dual variable");
        let _ = writeln!(out, "# y_i: measured output");
        let _ = writeln!(out, "# err: norm of (x, u, lambda) minus the regularized saddle point (NaN without oracle)");
        let _ = writeln!(out, "# envelope: certified tracking bound (NaN without a passing certificate)");
        let _ = writeln!(out, "# V, W, U: controller, plant and combined Lyapunov functions (NaN without certificate)");
        let _ = writeln!(out, "# sups are taken over the simulated window");
        out.push_str(&self.header());
        out.push('\n');
        for r in &self.records {
            let mut fields = vec![r.t];
            fields.extend(r.x.iter().chain(r.u.iter()).chain(r.lambda.iter()).chain(r.y.iter()));
            fields.extend([r.err, r.envelope, r.v, r.w_lyap, r.u_lyap]);
            let line: Vec<String> = fields.iter().map(|v| format!("{v:.16e}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.to_csv())
    }
}

/// One classical fourth-order Runge–Kutta step.
pub fn rk4_step<F>(mut f: F, t: f64, y: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
{
    let k1 = f(t, y);
    let k2 = f(t + h / 2.0, &(y + &k1 * (h / 2.0)));
    let k3 = f(t + h / 2.0, &(y + &k2 * (h / 2.0)));
    let k4 = f(t + h, &(y + &k3 * h));
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

enum PlantModel<'a> {
    Dynamic { plant: &'a dyn PlantDynamics, epsilon: f64 },
    /// `ε = 0`: the plant sits on its steady-state map.
    Reduced,
}

/// Closed-loop simulation builder.
pub struct Simulation<'a> {
    plant: PlantModel<'a>,
    problem: &'a TimeVaryingProblem,
    controller: &'a Controller,
    dt: f64,
    log_every: usize,
    oracle: Option<SolveOptions>,
    certificate: Option<Certificate>,
    clamp_inputs: bool,
}

impl Simulation<'_> {
    fn clamp(&self, u: &DVector<f64>) -> DVector<f64> {
        match self.controller {
            Controller::Alinea(a) if u.len() == a.upper.len() => a.clamp(u),
            _ => u.map(|v| v.max(0.0)),
        }
    }
}

impl<'a> Simulation<'a> {
    pub fn new(
        plant: &'a dyn PlantDynamics,
        problem: &'a TimeVaryingProblem,
        controller: &'a Controller,
        epsilon: f64,
    ) -> Self {
        Self::build(PlantModel::Dynamic { plant, epsilon }, problem, controller)
    }

    /// Reduced `ε = 0` loop, `y = G u + H w`.
    pub fn reduced(problem: &'a TimeVaryingProblem, controller: &'a Controller) -> Self {
        Self::build(PlantModel::Reduced, problem, controller)
    }

    fn build(plant: PlantModel<'a>, problem: &'a TimeVaryingProblem, controller: &'a Controller) -> Self {
        Self {
            plant,
            problem,
            controller,
            dt: 1e-3,
            log_every: 10,
            oracle: Some(SolveOptions::default()),
            certificate: None,
            clamp_inputs: matches!(controller, Controller::Alinea(_)),
        }
    }

    pub fn dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    /// Log every `k` steps.
    pub fn log_every(mut self, k: usize) -> Self {
        self.log_every = k.max(1);
        self
    }

    pub fn oracle(mut self, opts: Option<SolveOptions>) -> Self {
        self.oracle = opts;
        self
    }

    pub fn certificate(mut self, cert: Option<Certificate>) -> Self {
        self.certificate = cert;
        self
    }

    /// Clamp integrated inputs to `u ≥ 0` (or the ALINEA bounds) after
    /// every step.
    pub fn clamp_inputs(mut self, on: bool) -> Self {
        self.clamp_inputs = on;
        self
    }

    fn epsilon(&self) -> f64 {
        match self.plant {
            PlantModel::Dynamic { epsilon, .. } => epsilon,
            PlantModel::Reduced => 0.0,
        }
    }

    fn check(&self, x0: &DVector<f64>, z0: &ControllerState, t_span: (f64, f64)) -> Result<(), SimError> {
        let (t0, t1) = t_span;
        if !t0.is_finite() || !t1.is_finite() || t1 < t0 {
            return Err(SimError::InvalidSpan(format!("[{t0}, {t1}]")));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::InvalidSpan(format!("dt must be positive, got {}", self.dt)));
        }
        if let PlantModel::Dynamic { plant, epsilon } = self.plant {
            if !(epsilon > 0.0) {
                return Err(SimError::Control(ControlError::InvalidGain(format!(
                    "epsilon must be positive, got {epsilon}"
                ))));
            }
            if self.dt > epsilon / 10.0 * (1.0 + 1e-12) {
                return Err(SimError::StepTooLarge { dt: self.dt, limit: epsilon / 10.0 });
            }
            if x0.len() != plant.state_dim() {
                return Err(SimError::DimensionMismatch(format!(
                    "x0 has dimension {}, plant has {}",
                    x0.len(),
                    plant.state_dim()
                )));
            }
        }
        self.controller.check_problem(self.problem)?;
        let m = self.problem.m();
        let r = self.controller.dual_dim(self.problem);
        if z0.u.len() != m || z0.lambda.len() != r {
            return Err(SimError::DimensionMismatch(format!(
                "z0 has dimensions ({}, {}), expected ({m}, {r})",
                z0.u.len(),
                z0.lambda.len()
            )));
        }
        Ok(())
    }

    fn output(&self, x: &DVector<f64>, u: &DVector<f64>, t: f64) -> DVector<f64> {
        match self.plant {
            PlantModel::Dynamic { plant, .. } => plant.output(x, &self.problem.w(t)),
            PlantModel::Reduced => self.problem.steady_output(u, t),
        }
    }

    fn project(&self, z: &ControllerState) -> ControllerState {
        ControllerState { u: self.problem.input_set().project(&z.u), lambda: project_orthant(&z.lambda) }
    }

    fn distance_from_omega(&self, z: &ControllerState) -> f64 {
        let du = self.problem.input_set().distance(&z.u);
        let dl = z.lambda.iter().map(|l| (-l).max(0.0).powi(2)).sum::<f64>().sqrt();
        du.hypot(dl)
    }

    /// Integrates from `(x0, z0)` over `t_span`.
    pub fn run(
        &self,
        x0: &DVector<f64>,
        z0: &ControllerState,
        t_span: (f64, f64),
    ) -> Result<TrajectoryLog, SimError> {
        self.check(x0, z0, t_span)?;
        let start = Instant::now();
        let (t0, t1) = t_span;
        let span = t1 - t0;
        let steps = if span == 0.0 { 0 } else { (span / self.dt - 1e-9).ceil().max(1.0) as usize };
        let h = if steps == 0 { self.dt } else { span / steps as f64 };
        let m = z0.u.len();
        let r = z0.lambda.len();
        let projected = self.controller.is_projected();
        let always_project = matches!(self.controller, Controller::DiscontinuousPd { .. });

        let mut x = match self.plant {
            PlantModel::Dynamic { .. } => x0.clone(),
            PlantModel::Reduced => DVector::zeros(0),
        };
        let n = x.len();
        let mut z = z0.clone();
        let mut entered = projected && self.distance_from_omega(&z) <= ENTRY_TOL;
        let mut defect: f64 = 0.0;
        let mut controller_time = 0.0;
        let mut mpc_solves = 0;
        let mut mpc_softened = 0;
        let mut mpc_plan: Option<(f64, Vec<DVector<f64>>)> = None;
        let mut samples: Vec<(f64, DVector<f64>, ControllerState)> = Vec::new();

        for k in 0..=steps {
            let t = t0 + k as f64 * h;
            if k % self.log_every == 0 || k == steps {
                samples.push((t, x.clone(), z.clone()));
            }
            if k == steps {
                break;
            }
            if let Controller::Mpc(mpc) = self.controller {
                let period = mpc.applied_steps() as f64 * mpc.config().dt;
                let due = mpc_plan.as_ref().is_none_or(|(tp, _)| t - tp >= period - 1e-9 * period.max(1.0));
                if due {
                    let y = self.output(&x, &z.u, t);
                    let clock = Instant::now();
                    let plan = mpc.plan(&mpc.state_estimate(&y), t)?;
                    controller_time += clock.elapsed().as_secs_f64();
                    mpc_solves += 1;
                    mpc_softened += usize::from(plan.softened);
                    mpc_plan = Some((t, plan.inputs));
                }
                let (tp, inputs) = mpc_plan.as_ref().expect("plan computed above");
                let j = (((t - tp) / mpc.config().dt) + 1e-9).floor() as usize;
                z.u = inputs[j.min(inputs.len() - 1)].clone();
            }

            let project_stages = always_project || entered;
            let mut failure: Option<SimError> = None;
            let clock = Instant::now();
            let field = |ts: f64, s: &DVector<f64>| -> DVector<f64> {
                let mut zs = ControllerState::new(s.rows(n, m).into_owned(), s.rows(n + m, r).into_owned());
                if project_stages {
                    zs = self.project(&zs);
                }
                if self.clamp_inputs {
                    zs.u = self.clamp(&zs.u);
                }
                let xs = s.rows(0, n).into_owned();
                let y = self.output(&xs, &zs.u, ts);
                let dz = match self.controller.field(self.problem, &zs, &y, ts) {
                    Ok(Some(d)) => d,
                    Ok(None) => ControllerState::zeros(m, r),
                    Err(e) => {
                        failure.get_or_insert(e.into());
                        ControllerState::zeros(m, r)
                    }
                };
                let dx = match self.plant {
                    PlantModel::Dynamic { plant, epsilon } => plant.derivative(&xs, &zs.u, &self.problem.w(ts)) / epsilon,
                    PlantModel::Reduced => DVector::zeros(0),
                };
                linalg::concat(&dx, &dz.stacked())
            };
            let state = linalg::concat(&x, &z.stacked());
            let next = rk4_step(field, t, &state, h);
            controller_time += clock.elapsed().as_secs_f64();
            if let Some(e) = failure {
                return Err(e);
            }

            x = next.rows(0, n).into_owned();
            z = ControllerState::new(next.rows(n, m).into_owned(), next.rows(n + m, r).into_owned());
            if projected {
                if entered || always_project {
                    defect = defect.max(self.distance_from_omega(&z));
                    z = self.project(&z);
                }
                entered = entered || self.distance_from_omega(&z) <= ENTRY_TOL;
            }
            if self.clamp_inputs {
                z.u = self.clamp(&z.u);
            }
            let t_next = t0 + (k + 1) as f64 * h;
            if !linalg::all_finite(&next) || next.amax() > DIVERGENCE_LIMIT {
                let which = if !linalg::all_finite(&x) || x.amax() > DIVERGENCE_LIMIT { "plant state" } else { "controller state" };
                return Err(SimError::NonFiniteState {
                    t: t_next,
                    detail: format!("{which} left the finite range (|.|max = {:e})", next.amax()),
                });
            }
        }

        let mut records: Vec<LogRecord> = samples
            .into_iter()
            .map(|(t, x, z)| {
                let w = self.problem.w(t);
                let x = match self.plant {
                    PlantModel::Dynamic { .. } => x,
                    PlantModel::Reduced => self.problem.map().equilibrium_state(&z.u, &w),
                };
                let y = self.output(&x, &z.u, t);
                LogRecord {
                    t,
                    x,
                    u: z.u,
                    lambda: z.lambda,
                    y,
                    w,
                    err: f64::NAN,
                    envelope: f64::NAN,
                    v: f64::NAN,
                    w_lyap: f64::NAN,
                    u_lyap: f64::NAN,
                }
            })
            .collect();

        let times: Vec<f64> = records.iter().map(|r| r.t).collect();
        let oracle = match &self.oracle {
            Some(opts) => self.problem.solve_on_grid(&times, opts)?,
            None => Vec::new(),
        };
        let sup_zstar_rate = oracle
            .windows(2)
            .zip(times.windows(2))
            .map(|(sp, ts)| (sp[1].z() - sp[0].z()).norm() / (ts[1] - ts[0]))
            .fold(0.0, f64::max);
        let sup_w_rate = self.problem.disturbance().sup_rate(t0, t1);
        for (rec, sp) in records.iter_mut().zip(&oracle) {
            rec.err = tracking_error(rec, sp);
        }

        let mut log = TrajectoryLog {
            controller: self.controller.name().to_string(),
            epsilon: self.epsilon(),
            dt: h,
            log_period: h * self.log_every as f64,
            records,
            oracle,
            certificate: self.certificate.clone(),
            sup_zstar_rate,
            sup_w_rate,
            invariance_defect: defect,
            mpc_solves,
            mpc_softened,
            controller_time,
            wall_time: 0.0,
        };
        if let Some(cert) = log.certificate.clone().filter(|c| c.pass()) {
            if let Some(e0) = log.records.first().map(|r| r.err).filter(|e| e.is_finite()) {
                for rec in &mut log.records {
                    rec.envelope = cert
                        .envelope(e0, t0, rec.t, sup_zstar_rate, sup_w_rate)
                        .expect("certificate passes");
                }
            }
        }
        if let Some(cert) = &log.certificate {
            if !log.oracle.is_empty() {
                let diag = lyapunov_diagnostics(&log, self.problem, cert);
                for (rec, s) in log.records.iter_mut().zip(&diag.samples) {
                    rec.v = s.v;
                    rec.w_lyap = s.w;
                    rec.u_lyap = s.u;
                }
            }
        }
        log.wall_time = start.elapsed().as_secs_f64();
        Ok(log)
    }
}

/// Runs the closed loop with the plant time scale taken from `gains`.
#[allow(clippy::too_many_arguments)]
pub fn integrate(
    plant: &dyn PlantDynamics,
    problem: &TimeVaryingProblem,
    controller: &Controller,
    gains: &ControllerGains,
    x0: &DVector<f64>,
    z0: &ControllerState,
    t_span: (f64, f64),
    dt: f64,
) -> Result<TrajectoryLog, SimError> {
    gains.validate()?;
    Simulation::new(plant, problem, controller, gains.epsilon).dt(dt).run(x0, z0, t_span)
}

/// `‖ξ − ξ★‖` over the components the log carries.
pub fn tracking_error(rec: &LogRecord, sp: &SaddlePoint) -> f64 {
    let mut sq = (&rec.u - &sp.u).norm_squared();
    if rec.x.len() == sp.x.len() {
        sq += (&rec.x - &sp.x).norm_squared();
    }
    if rec.lambda.len() == sp.lambda.len() {
        sq += (&rec.lambda - &sp.lambda).norm_squared();
    }
    sq.sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingReport {
    /// `max_t(‖ξ̃(t)‖ − envelope(t))`; NaN without an envelope.
    pub max_violation: f64,
    /// Samples where the error exceeds the envelope.
    pub violations: usize,
    /// Mean error over the last 10% of samples.
    pub asymptotic_error: f64,
    pub initial_error: f64,
    pub final_error: f64,
    /// Least-squares slope of `log‖ξ̃‖` over the transient.
    pub decay_rate: Option<f64>,
    pub fit_error: Option<String>,
    /// `γ_z·sup‖ż★‖ + γ_w·sup‖ẇ‖`; NaN without a certificate.
    pub residual_radius: f64,
    pub sup_zstar_rate: f64,
    pub sup_w_rate: f64,
}

/// Envelope comparison, asymptotic error and fitted decay rate.
pub fn tracking_report(log: &TrajectoryLog, cert: Option<&Certificate>) -> TrackingReport {
    let errs: Vec<f64> = log.records.iter().map(|r| r.err).collect();
    let initial_error = errs.first().copied().unwrap_or(f64::NAN);
    let final_error = errs.last().copied().unwrap_or(f64::NAN);
    let tail = (errs.len() / 10).max(1).min(errs.len());
    let asymptotic_error = if errs.is_empty() {
        f64::NAN
    } else {
        errs[errs.len() - tail..].iter().sum::<f64>() / tail as f64
    };
    let residual_radius = cert.map_or(f64::NAN, |c| c.residual_radius(log.sup_zstar_rate, log.sup_w_rate));

    let mut max_violation = f64::NAN;
    let mut violations = 0;
    if let Some(c) = cert.filter(|c| c.pass()) {
        let t0 = log.records.first().map_or(0.0, |r| r.t);
        for r in &log.records {
            let env = c.envelope(initial_error, t0, r.t, log.sup_zstar_rate, log.sup_w_rate).expect("passes");
            let gap = r.err - env;
            max_violation = if max_violation.is_nan() { gap } else { max_violation.max(gap) };
            violations += usize::from(gap > 0.0);
        }
    }

    // Transient: samples well above the floor reached at the end.
    let floor = asymptotic_error.max(if residual_radius.is_finite() { residual_radius } else { 0.0 }).max(1e-12);
    let transient: Vec<(f64, f64)> = log
        .records
        .iter()
        .take_while(|r| r.err > 10.0 * floor)
        .map(|r| (r.t, r.err.ln()))
        .collect();
    let (decay_rate, fit_error) = if transient.len() < 3 {
        (None, Some(format!("transient has {} samples, need at least 3", transient.len())))
    } else {
        let n = transient.len() as f64;
        let mt = transient.iter().map(|p| p.0).sum::<f64>() / n;
        let ml = transient.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = transient.iter().map(|p| (p.0 - mt).powi(2)).sum();
        let sxy: f64 = transient.iter().map(|p| (p.0 - mt) * (p.1 - ml)).sum();
        if sxx > 0.0 {
            (Some(sxy / sxx), None)
        } else {
            (None, Some("transient spans zero time".into()))
        }
    };

    TrackingReport {
        max_violation,
        violations,
        asymptotic_error,
        initial_error,
        final_error,
        decay_rate,
        fit_error,
        residual_radius,
        sup_zstar_rate: log.sup_zstar_rate,
        sup_w_rate: log.sup_w_rate,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovSample {
    pub v: f64,
    pub w: f64,
    pub u: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovDiagnostics {
    pub samples: Vec<LyapunovSample>,
    /// Indices `k` where `U` increases from sample `k` to `k + 1` while
    /// `‖ξ̃(t_k)‖` is outside the residual ball.
    pub flagged: Vec<usize>,
    pub radius: f64,
}

/// Relative tolerance on `U` increases.
pub const LYAPUNOV_RTOL: f64 = 1e-9;

/// `V`, `W`, `U = (1−θ)V + θW` per sample and flagged increases.
/// Requires a log with oracle data.
pub fn lyapunov_diagnostics(log: &TrajectoryLog, problem: &TimeVaryingProblem, cert: &Certificate) -> LyapunovDiagnostics {
    let theta = cert.theta();
    let p_x = &cert.norms().p_x;
    let p_z = match cert {
        Certificate::Equality(r) => Some(r.p_z_matrix()),
        Certificate::Inequality(_) => None,
    };
    let map = problem.map();
    let samples: Vec<LyapunovSample> = log
        .records
        .iter()
        .zip(&log.oracle)
        .map(|(rec, sp)| {
            let z_tilde = linalg::concat(&(&rec.u - &sp.u), &(&rec.lambda - &sp.lambda));
            let v = match &p_z {
                Some(pz) if pz.nrows() == z_tilde.len() => z_tilde.dot(&(pz * &z_tilde)),
                _ => 0.5 * z_tilde.norm_squared(),
            };
            let w = if rec.x.len() == p_x.nrows() && map.state_dim() == rec.x.len() {
                let x_tilde = &rec.x - map.equilibrium_state(&rec.u, &rec.w);
                x_tilde.dot(&(p_x * &x_tilde))
            } else {
                0.0
            };
            LyapunovSample { v, w, u: (1.0 - theta) * v + theta * w }
        })
        .collect();
    let radius = cert.residual_radius(log.sup_zstar_rate, log.sup_w_rate).max(1e-8);
    let flagged = (0..samples.len().saturating_sub(1))
        .filter(|&k| {
            log.records[k].err > radius && samples[k + 1].u > samples[k].u * (1.0 + LYAPUNOV_RTOL) + 1e-300
        })
        .collect();
    LyapunovDiagnostics { samples, flagged, radius }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certificates::{certify_equality, certify_inequality};
    use crate::plant::LtiPlant;
    use crate::problem::{ConstraintKind, InputSet, OutputConstraint, QuadraticCost};
    use crate::signal::{DisturbanceSignal, ScalarSignal, VectorSignal};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use std::sync::Arc;

    fn one() -> DMatrix<f64> {
        DMatrix::identity(1, 1)
    }

    fn scalar_plant() -> LtiPlant {
        LtiPlant::new(-one(), one(), one(), DMatrix::zeros(1, 1), one()).unwrap()
    }

    fn static_problem(plant: &LtiPlant, e: f64, nu: f64) -> TimeVaryingProblem {
        let cost = QuadraticCost::input_only(DMatrix::from_element(1, 1, 2.0), VectorSignal::constant(&[1.0]), 1).unwrap();
        TimeVaryingProblem::new(
            Arc::new(cost),
            OutputConstraint::constant(ConstraintKind::Inequality, one(), VectorSignal::constant(&[e])).unwrap(),
            InputSet::FullSpace { dim: 1 },
            nu,
            plant.steady_state_map().unwrap(),
            DisturbanceSignal::zeros(1),
        )
        .unwrap()
    }

    #[test]
    fn open_loop_exponential() {
        let plant = scalar_plant();
        let p = static_problem(&plant, 0.5, 1.0);
        let c = Controller::OpenLoop { u: DVector::zeros(1) };
        let log = Simulation::new(&plant, &p, &c, 1.0)
            .dt(1e-3)
            .oracle(None)
            .run(&DVector::from_element(1, 1.0), &ControllerState::zeros(1, 0), (0.0, 1.0))
            .unwrap();
        assert_relative_eq!(log.last().unwrap().x[0], (-1.0_f64).exp(), epsilon = 1e-8);
        assert_relative_eq!(log.last().unwrap().t, 1.0);
        assert_eq!(log.len(), 101);
    }

    #[test]
    fn step_too_large() {
        let plant = scalar_plant();
        let p = static_problem(&plant, 0.5, 1.0);
        let c = Controller::ProjectedPd { eta: 0.1 };
        let err = Simulation::new(&plant, &p, &c, 0.01)
            .dt(0.01)
            .run(&DVector::zeros(1), &ControllerState::zeros(1, 1), (0.0, 1.0))
            .unwrap_err();
        assert!(matches!(err, SimError::StepTooLarge { .. }));
    }

    #[test]
    fn divergence_detected() {
        let plant = LtiPlant::new(one(), one(), one(), DMatrix::zeros(1, 1), one()).unwrap();
        let p = static_problem(&scalar_plant(), 0.5, 1.0);
        let c = Controller::OpenLoop { u: DVector::zeros(1) };
        let err = Simulation::new(&plant, &p, &c, 1.0)
            .dt(0.05)
            .oracle(None)
            .run(&DVector::from_element(1, 1.0), &ControllerState::zeros(1, 0), (0.0, 100.0))
            .unwrap_err();
        assert!(matches!(err, SimError::NonFiniteState { .. }));
    }

    #[test]
    fn equilibrium_persists() {
        let plant = scalar_plant();
        let p = static_problem(&plant, 0.5, 1.0);
        let sp = p.solve_saddle_point(0.0, &SolveOptions::default()).unwrap();
        let c = Controller::ProjectedPd { eta: 0.05 };
        let log = Simulation::new(&plant, &p, &c, 0.01)
            .dt(1e-3)
            .run(&sp.x, &ControllerState::new(sp.u.clone(), sp.lambda.clone()), (0.0, 5.0))
            .unwrap();
        assert!(log.records.iter().all(|r| r.err <= 1e-7));
    }

    #[test]
    fn static_run_meets_envelope() {
        let plant = scalar_plant();
        let stab = plant.check_stability(None).unwrap();
        let p = static_problem(&plant, 0.5, 1.0);
        let eta = 0.05;
        let rep = certify_inequality(&plant, Some(&stab), &p, eta, 0.01).unwrap();
        let eps = rep.epsilon_max / 2.0;
        let rep = certify_inequality(&plant, Some(&stab), &p, eta, eps).unwrap();
        let cert = Certificate::Inequality(rep);
        let t_end = 20.0 / cert.rho_xi();
        let c = Controller::ProjectedPd { eta };
        let log = Simulation::new(&plant, &p, &c, eps)
            .dt(eps / 10.0)
            .log_every(((t_end / (eps / 10.0)) / 2000.0).ceil() as usize)
            .certificate(Some(cert.clone()))
            .run(&DVector::from_element(1, -1.0), &ControllerState::new(DVector::from_element(1, -1.0), DVector::from_element(1, 1.0)), (0.0, t_end))
            .unwrap();
        let rep = tracking_report(&log, Some(&cert));
        assert!(rep.max_violation <= 0.0, "{rep:?}");
        assert!(rep.final_error < 1e-4, "{rep:?}");
        let diag = lyapunov_diagnostics(&log, &p, &cert);
        assert!(diag.flagged.is_empty(), "{:?}", &diag.flagged[..diag.flagged.len().min(5)]);
        let rate = rep.decay_rate.unwrap();
        assert!(rate <= -cert.rho_xi() / 2.0 + 1e-6, "{rate} vs {}", cert.rho_xi());
    }

    #[test]
    fn equality_lyapunov_zero_at_equilibrium() {
        let plant = scalar_plant();
        let stab = plant.check_stability(None).unwrap();
        let cost = QuadraticCost::new(
            one(),
            VectorSignal::constant(&[1.0]),
            one(),
            VectorSignal::zeros(1),
            VectorSignal::zeros(1),
        )
        .unwrap();
        let p = TimeVaryingProblem::new(
            Arc::new(cost),
            OutputConstraint::constant(ConstraintKind::Equality, one(), VectorSignal::constant(&[0.5])).unwrap(),
            InputSet::FullSpace { dim: 1 },
            0.0,
            plant.steady_state_map().unwrap(),
            DisturbanceSignal::zeros(1),
        )
        .unwrap();
        let cert = Certificate::Equality(certify_equality(&plant, Some(&stab), &p, 2.0, 0.5, 1e-6).unwrap());
        let sp = p.solve_saddle_point(0.0, &SolveOptions::default()).unwrap();
        let c = Controller::EqualityPd { eta_u: 2.0, eta_lambda: 0.5 };
        let log = Simulation::new(&plant, &p, &c, 1e-3)
            .dt(1e-4)
            .certificate(Some(cert.clone()))
            .run(&sp.x, &ControllerState::new(sp.u.clone(), sp.lambda.clone()), (0.0, 0.01))
            .unwrap();
        let r = &log.records[0];
        assert!(r.v.abs() < 1e-18 && r.w_lyap.abs() < 1e-18 && r.u_lyap.abs() < 1e-18);
    }

    #[test]
    fn zero_span_report() {
        let plant = scalar_plant();
        let p = static_problem(&plant, 0.5, 1.0);
        let c = Controller::ProjectedPd { eta: 0.05 };
        let log = Simulation::new(&plant, &p, &c, 0.01)
            .run(&DVector::zeros(1), &ControllerState::zeros(1, 1), (0.0, 0.0))
            .unwrap();
        assert_eq!(log.len(), 1);
        let rep = tracking_report(&log, None);
        assert!(rep.fit_error.is_some());
        assert_eq!(rep.initial_error, log.records[0].err);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let f = |_: f64, y: &DVector<f64>| DVector::from_element(1, -y[0]);
        let solve = |h: f64| {
            let mut y = DVector::from_element(1, 1.0);
            let n = (4.0 / h).round() as usize;
            for k in 0..n {
                y = rk4_step(f, k as f64 * h, &y, h);
            }
            y[0]
        };
        let reference = solve(0.2 / 8.0);
        let ratio = (solve(0.2) - reference).abs() / (solve(0.1) - reference).abs();
        assert!((ratio - 16.0).abs() < 0.3 * 16.0, "{ratio}");
    }

    #[test]
    fn csv_layout() {
        let plant = scalar_plant();
        let p = static_problem(&plant, 0.5, 1.0)
            .with_disturbance(DisturbanceSignal::new(VectorSignal::Components(vec![ScalarSignal::Sinusoid {
                amplitude: 1.0,
                frequency: 0.1,
                phase: 0.0,
                offset: 0.0,
            }])))
            .unwrap();
        let c = Controller::ProjectedPd { eta: 0.05 };
        let log = Simulation::new(&plant, &p, &c, 0.01)
            .run(&DVector::zeros(1), &ControllerState::zeros(1, 1), (0.0, 0.1))
            .unwrap();
        let csv = log.to_csv();
        let header = csv.lines().find(|l| !l.starts_with('#')).unwrap();
        assert_eq!(header, "t,x_1,u_1,lambda_1,y_1,err,envelope,V,W,U");
        let row = csv.lines().filter(|l| !l.starts_with('#')).nth(1).unwrap();
        assert_eq!(row.split(',').count(), 10);
        assert!(row.starts_with("0.0000000000000000e0,"));
        assert_relative_eq!(log.sup_w_rate, 2.0 * std::f64::consts::PI * 0.1, epsilon = 1e-9);
        assert_eq!(csv, log.to_csv());
    }
}
