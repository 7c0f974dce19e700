//! Acceptance suite: one PASS/FAIL line per criterion. Exits nonzero if any
//! criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::DVector;

use feedopt::certificates::Certificate;
use feedopt::config::ControllerBlock;
use feedopt::linalg;
use feedopt::presets;
use feedopt::problem::{ConstraintKind, SolveOptions};
use feedopt::scenario::{compare, Scenario};
use feedopt::traffic::CtmPlant;
use feedopt::{ControllerState, Simulation};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

type Check = fn() -> Result<Outcome, feedopt::Error>;

fn regularization_bound() -> Result<Outcome, feedopt::Error> {
    let mut pass = true;
    let mut parts = Vec::new();
    for nu in [1e-3, 1e-2, 1e-1] {
        let mut cfg = presets::scalar_static();
        cfg.problem = Some(presets::scalar_problem(ConstraintKind::Inequality, 0.0, nu));
        let s = Scenario::build(&cfg)?;
        let r = s.problem.regularization_error_check(0.0)?;
        pass &= r.lhs <= r.rhs + 1e-8;
        if nu == 1e-1 {
            pass &= (r.lhs - 7.0 / 36.0).abs() < 1e-8 && (r.rhs - 0.2).abs() < 1e-8;
        }
        parts.push(format!("nu={nu:e}: {:.6} <= {:.6}", r.lhs, r.rhs));
    }
    Ok(Outcome::new(pass, parts.join("; ")))
}

fn static_regulation() -> Result<Outcome, feedopt::Error> {
    let mut pass = true;
    let mut parts = Vec::new();
    for cfg in [presets::scalar_static(), presets::two_link()] {
        let o = Scenario::build(&cfg)?.run()?;
        let cert = o.certificate.as_ref().expect("certified preset");
        let horizon = 20.0 / cert.rho_xi();
        let t_end = cfg.simulation.t_span[1];
        let ok = cert.pass() && o.tracking.violations == 0 && t_end >= horizon && o.tracking.final_error < 1e-4;
        pass &= ok;
        parts.push(format!(
            "{}: certified={} envelope violations={} t_end={t_end} >= 20/rho_xi={horizon:.1} final error={:.2e}",
            cfg.name,
            cert.pass(),
            o.tracking.violations,
            o.tracking.final_error
        ));
    }
    Ok(Outcome::new(pass, parts.join("; ")))
}

fn iss_bound() -> Result<Outcome, feedopt::Error> {
    let runs: Vec<_> = [0.1, 0.05]
        .iter()
        .map(|&f| Scenario::build(&presets::scalar_sinusoid(f))?.run())
        .collect::<Result<_, _>>()?;
    let mut pass = true;
    let mut parts = Vec::new();
    for o in &runs {
        let cert = o.certificate.as_ref().expect("certified preset");
        pass &= cert.pass() && o.tracking.asymptotic_error <= o.tracking.residual_radius;
        parts.push(format!(
            "{}: asymptotic error {:.4} <= {:.4}",
            o.name, o.tracking.asymptotic_error, o.tracking.residual_radius
        ));
    }
    let monotone = runs[1].tracking.asymptotic_error <= runs[0].tracking.asymptotic_error;
    pass &= monotone;
    parts.push(format!("halved frequency does not increase error: {monotone}"));
    Ok(Outcome::new(pass, parts.join("; ")))
}

fn equality_track() -> Result<Outcome, feedopt::Error> {
    let cfg = presets::equality_scalar();
    let s = Scenario::build(&cfg)?;
    let cert = s.certify()?;
    let Certificate::Equality(eq) = &cert else { unreachable!("equality preset") };
    let eig = linalg::symmetric_eigenvalues(&eq.p_z_matrix());
    let pd = eig.iter().all(|&l| l > 0.0);
    let ratio_ok = eq.eta_u / eq.eta_lambda > eq.required_ratio;
    let o = s.run()?;
    let sp = s.problem.solve_saddle_point(0.0, &SolveOptions::default())?;
    let y = s.problem.steady_output(&sp.u, 0.0);
    let field = s
        .controller
        .field(&s.problem, &ControllerState::new(sp.u.clone(), sp.lambda.clone()), &y, 0.0)?
        .expect("continuous controller");
    let rest = field.stacked().norm();
    let pass = pd && ratio_ok && cert.pass() && o.tracking.violations == 0 && sp.kkt_residual < 1e-6 && rest < 1e-6;
    Ok(Outcome::new(
        pass,
        format!(
            "eig(P_z)={:?} ratio ok={ratio_ok} certified={} envelope violations={} KKT residual={:.2e} field at equilibrium={:.2e}",
            eig.iter().map(|l| format!("{l:.4}")).collect::<Vec<_>>(),
            cert.pass(),
            o.tracking.violations,
            sp.kkt_residual,
            rest
        ),
    ))
}

fn monotonicity_lipschitz() -> Result<Outcome, feedopt::Error> {
    let mut pass = true;
    let mut parts = Vec::new();
    for cfg in [presets::scalar_static(), presets::two_link()] {
        let s = Scenario::build(&cfg)?;
        let p = &s.problem;
        let est = p.estimate_constants(1000, 10.0, (0.0, 10.0), 11)?;
        let c = p.cost().constants();
        let g = linalg::spectral_norm(&p.map().g);
        let ell_literal =
            std::f64::consts::SQRT_2 * (p.constraint().k_bar() + (c.ell_u + g * g * c.ell_y).max(p.nu()));
        let ok = est.mu_hat >= est.mu - 1e-8 && est.ell_hat <= est.ell + 1e-8 && est.ell_hat <= ell_literal + 1e-8;
        pass &= ok;
        parts.push(format!(
            "{}: mu_hat={:.4} >= mu={:.4}, ell_hat={:.4} <= ell={:.4} (without the max(1,|G|) factor {:.4})",
            cfg.name, est.mu_hat, est.mu, est.ell_hat, est.ell, ell_literal
        ));
    }
    Ok(Outcome::new(pass, parts.join("; ")))
}

/// Largest change of the finite-difference input rate between samples.
fn rate_jump(log: &feedopt::TrajectoryLog) -> f64 {
    let rates: Vec<f64> = log.records.windows(2).map(|w| (w[1].u[0] - w[0].u[0]) / (w[1].t - w[0].t)).collect();
    rates.windows(2).map(|r| (r[1] - r[0]).abs()).fold(0.0, f64::max)
}

fn invariance_smoothness() -> Result<Outcome, feedopt::Error> {
    let scenario = Scenario::build(&presets::boundary_crossing(ControllerBlock::ProjectedPd))?;
    let smooth = scenario.run()?;
    let rough = Scenario::build(&presets::boundary_crossing(ControllerBlock::DiscontinuousPd { deltas: None }))?.run()?;
    let set = scenario.problem.input_set();
    let entry = smooth.log.records.iter().position(|r| set.distance(&r.u) <= 1e-12).unwrap_or(smooth.log.len());
    let outside = smooth.log.records[entry..].iter().map(|r| set.distance(&r.u)).fold(0.0, f64::max);
    let gap = smooth.log.last().map_or(f64::INFINITY, |r| 0.5 - r.u[0]);
    let reached = rough.log.last().is_some_and(|r| r.u[0] == 0.5) && gap < 1e-4;
    let (js, jr) = (rate_jump(&smooth.log), rate_jump(&rough.log));
    let pass = entry < smooth.log.len()
        && outside <= 1e-9
        && smooth.log.invariance_defect <= 1e-9
        && reached
        && jr > 10.0 * js;
    Ok(Outcome::new(
        pass,
        format!(
            "distance from U after entry={outside:.1e} step defect={:.1e} final gap to the face={gap:.1e}; rate jump smooth={js:.3e} discontinuous={jr:.3e} ratio={:.1}",
            smooth.log.invariance_defect,
            jr / js
        ),
    ))
}

fn traffic_case_study() -> Result<Outcome, feedopt::Error> {
    let (clean, _) = compare(&presets::traffic_comparison(false))?;
    let (noisy, _) = compare(&presets::traffic_comparison(true))?;
    let pd = clean.row("projected_pd").expect("row");
    let alinea = clean.row("alinea").expect("row");
    let net = feedopt::traffic::example_network();
    let fraction = presets::traffic(ControllerBlock::ProjectedPd, false).network.expect("network").ceiling_fraction;
    let ceiling_norm = (net.ceilings() * fraction).norm();
    let pd_n = noisy.row("projected_pd").expect("row");
    let mpc_n = noisy.row("mpc").expect("row");
    let thr = pd.mean_throughput.unwrap_or(f64::NAN) >= alinea.mean_throughput.unwrap_or(f64::NAN);
    let viol = pd.post_transient_violation < 0.05 * ceiling_norm;
    let integral = pd_n.violation_integral <= mpc_n.violation_integral;
    let compute = pd_n.controller_time <= mpc_n.controller_time;
    Ok(Outcome::new(
        thr && viol && integral && compute,
        format!(
            "throughput pd={:.4} alinea={:.4}; post-transient violation {:.3e} < {:.3e}; noisy violation integral pd={:.3} mpc={:.3}; compute pd={:.3}s mpc={:.3}s",
            pd.mean_throughput.unwrap_or(f64::NAN),
            alinea.mean_throughput.unwrap_or(f64::NAN),
            pd.post_transient_violation,
            0.05 * ceiling_norm,
            pd_n.violation_integral,
            mpc_n.violation_integral,
            pd_n.controller_time,
            mpc_n.controller_time
        ),
    ))
}

fn freeflow_agreement() -> Result<Outcome, feedopt::Error> {
    let mut cfg = presets::traffic(ControllerBlock::OpenLoop { u: vec![4.0, 4.0] }, false);
    cfg.simulation.x0 = Some(vec![0.0; 7]);
    let s = Scenario::build(&cfg)?;
    let net = s.network.clone().expect("network scenario");
    let ctm = CtmPlant { network: net.clone() };
    let eps = cfg.gains.epsilon;
    let span = (cfg.simulation.t_span[0], cfg.simulation.t_span[1]);
    let run = |plant: &dyn feedopt::plant::PlantDynamics| {
        Simulation::new(plant, &s.problem, &s.controller, eps).dt(cfg.simulation.dt).log_every(1).oracle(None).run(&s.x0, &s.z0, span)
    };
    let a = run(&ctm)?;
    let b = run(&s.lti)?;
    let gap = a.records.iter().zip(&b.records).map(|(p, q)| (&p.x - &q.x).amax()).fold(0.0, f64::max);
    let crit: DVector<f64> = DVector::from_iterator(net.link_count(), net.links().iter().map(|l| l.critical_demand()));
    let headroom = a.records.iter().map(|r| (&crit - &r.x).min()).fold(f64::INFINITY, f64::min);
    Ok(Outcome::new(
        gap <= 1e-8 && headroom > 0.0 && a.len() == b.len(),
        format!("max |x_ctm - x_lin| = {gap:.2e} over {} samples; min distance below critical = {headroom:.3}", a.len()),
    ))
}

fn numerics() -> Result<Outcome, feedopt::Error> {
    let cfg = presets::scalar_static();
    let s = Scenario::build(&cfg)?;
    let eps = cfg.gains.epsilon;
    let final_state = |h: f64| -> Result<DVector<f64>, feedopt::Error> {
        let log = Simulation::new(&s.lti, &s.problem, &s.controller, eps)
            .dt(h)
            .log_every(usize::MAX)
            .oracle(None)
            .run(&DVector::from_element(1, 3.0), &s.z0, (0.0, 0.25))?;
        let r = log.last().expect("final sample");
        Ok(linalg::concat(&r.x, &linalg::concat(&r.u, &r.lambda)))
    };
    let reference = final_state(2.5e-4)?;
    let e1 = (final_state(4e-3)? - &reference).norm();
    let e2 = (final_state(2e-3)? - &reference).norm();
    let ratio = e1 / e2;
    let order_ok = (ratio - 16.0).abs() <= 0.3 * 16.0;
    let mut worst: f64 = 0.0;
    let mut names = Vec::new();
    for cfg in presets::all() {
        let s = Scenario::build(&cfg)?;
        if let Some(stab) = &s.stability {
            worst = worst.max(stab.residual).max(linalg::lyapunov_residual(s.lti.a(), &stab.p_x, &stab.q_x));
            names.push(cfg.name.clone());
        }
    }
    Ok(Outcome::new(
        order_ok && worst < 1e-10,
        format!(
            "RK4 error ratio under dt halving = {ratio:.2} ({e1:.2e} / {e2:.2e}); max Lyapunov residual = {worst:.1e} over {} benchmarks",
            names.len()
        ),
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, Check, Duration); 9] = [
        ("regularization error bound", regularization_bound, Duration::from_secs(1)),
        ("static exponential regulation", static_regulation, Duration::from_secs(20)),
        ("ISS under sinusoidal disturbance", iss_bound, Duration::from_secs(30)),
        ("equality track", equality_track, Duration::from_secs(10)),
        ("monotonicity and Lipschitz constants", monotonicity_lipschitz, Duration::from_secs(1)),
        ("forward invariance and smoothness", invariance_smoothness, Duration::from_secs(5)),
        ("ramp-metering comparison", traffic_case_study, Duration::from_secs(120)),
        ("free-flow agreement", freeflow_agreement, Duration::from_secs(5)),
        ("integrator order and Lyapunov residuals", numerics, Duration::from_secs(1)),
    ];
    let mut failed = 0;
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check().unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
        let elapsed = start.elapsed();
        let in_budget = elapsed <= *budget;
        let pass = outcome.pass && in_budget;
        if !pass {
            failed += 1;
        }
        println!(
            "{} {:>2} {name} [{:.2}s of {}s]: {}",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            elapsed.as_secs_f64(),
            budget.as_secs(),
            outcome.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
