//! Benchmark experiment configs. The files under `configs/` mirror these.

use crate::config::{
    ConstraintBlock, ControllerBlock, CostBlock, ExperimentConfig, NetworkBlock, NoiseBlock, PlantBlock, ProblemBlock,
    SimulationBlock,
};
use crate::controllers::{ControllerGains, MpcConfig};
use crate::problem::{ConstraintKind, InputSet};
use crate::signal::ScalarSignal;

fn c(v: f64) -> ScalarSignal {
    ScalarSignal::Constant(v)
}

fn sim(t_end: f64, dt: f64, log_every: usize) -> SimulationBlock {
    SimulationBlock {
        t_span: [0.0, t_end],
        dt,
        log_every,
        x0: None,
        u0: None,
        lambda0: None,
        reduced: false,
        oracle: true,
        certify: true,
        transient: None,
    }
}

fn base(name: &str, plant: PlantBlock, problem: ProblemBlock, controller: ControllerBlock, gains: ControllerGains, simulation: SimulationBlock) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        seed: 0,
        plant: Some(plant),
        network: None,
        problem: Some(problem),
        controller,
        gains,
        simulation,
        output_dir: None,
        base_dir: Default::default(),
    }
}

/// `ẋ = −x + u + w`, `y = x`.
pub fn scalar_plant() -> PlantBlock {
    PlantBlock { a: vec![vec![-1.0]], b: vec![vec![1.0]], c: vec![vec![1.0]], d: None, e: vec![vec![1.0]], q_x: None }
}

/// `φ(u) = (u − 1)²`, `y ≤ 0.5`.
pub fn scalar_problem(kind: ConstraintKind, e: f64, nu: f64) -> ProblemBlock {
    ProblemBlock {
        kind,
        nu,
        input_set: None,
        cost: CostBlock { q_u: vec![vec![2.0]], r_u: vec![c(1.0)], q_y: None, r_y: None, c: None },
        constraint: ConstraintBlock { k: vec![vec![1.0]], e: vec![c(e)] },
        disturbance: None,
    }
}

/// Static scalar benchmark with certified gains; runs for `20/ρ_ξ`.
pub fn scalar_static() -> ExperimentConfig {
    let mut cfg = base(
        "scalar_static",
        scalar_plant(),
        scalar_problem(ConstraintKind::Inequality, 0.5, 1.0),
        ControllerBlock::ProjectedPd,
        ControllerGains::projected(0.05, 0.074),
        sim(410.0, 0.005, 100),
    );
    cfg.simulation.u0 = Some(vec![-1.0]);
    cfg.simulation.lambda0 = Some(vec![1.0]);
    cfg
}

/// Scalar plant under `w_t = sin(2π f t)` with a weak ceiling `0.1y ≤ 0.05`
/// and `ν = μ_u`, so the loop is fast against the disturbance period.
pub fn scalar_sinusoid(frequency: f64) -> ExperimentConfig {
    let mut problem = scalar_problem(ConstraintKind::Inequality, 0.05, 2.0);
    problem.constraint.k = vec![vec![0.1]];
    problem.disturbance = Some(vec![ScalarSignal::Sinusoid { amplitude: 1.0, frequency, phase: 0.0, offset: 0.0 }]);
    base(
        &format!("scalar_sinusoid_{frequency}"),
        scalar_plant(),
        problem,
        ControllerBlock::ProjectedPd,
        ControllerGains::projected(0.2, 0.4),
        sim(200.0, 0.01, 10),
    )
}

/// Two-state chain `ẋ₁ = −x₁ + u₁`, `ẋ₂ = 0.5x₁ − x₂ + u₂`, with a box on
/// `u` and a ceiling on `y₂`.
pub fn two_link() -> ExperimentConfig {
    let plant = PlantBlock {
        a: vec![vec![-1.0, 0.0], vec![0.5, -1.0]],
        b: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        c: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        d: None,
        e: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        q_x: None,
    };
    let problem = ProblemBlock {
        kind: ConstraintKind::Inequality,
        nu: 2.0,
        input_set: Some(InputSet::Box { lower: vec![0.0, 0.0], upper: vec![2.0, 2.0] }),
        cost: CostBlock {
            q_u: vec![vec![2.0, 0.0], vec![0.0, 2.0]],
            r_u: vec![c(1.0), c(1.0)],
            q_y: Some(vec![vec![0.5, 0.0], vec![0.0, 0.5]]),
            r_y: None,
            c: None,
        },
        constraint: ConstraintBlock { k: vec![vec![0.0, 1.0]], e: vec![c(1.0)] },
        disturbance: None,
    };
    let mut cfg = base(
        "two_link_static",
        plant,
        problem,
        ControllerBlock::ProjectedPd,
        ControllerGains::projected(0.02, 0.12),
        sim(170.0, 0.002, 250),
    );
    cfg.simulation.u0 = Some(vec![0.0, 2.0]);
    cfg.simulation.lambda0 = Some(vec![0.5]);
    cfg
}

/// Scalar equality-constrained benchmark, `y = 0.5`.
pub fn equality_scalar() -> ExperimentConfig {
    let mut cfg = base(
        "equality_scalar",
        scalar_plant(),
        scalar_problem(ConstraintKind::Equality, 0.5, 0.0),
        ControllerBlock::EqualityPd,
        ControllerGains::equality(1e-4, 2.0, 1.0),
        sim(10.0, 1e-5, 2000),
    );
    cfg.simulation.u0 = Some(vec![-1.0]);
    cfg.simulation.lambda0 = Some(vec![1.0]);
    cfg
}

/// Reduced-loop scalar run whose unconstrained optimum `u = 1` lies
/// outside `𝒰 = [−1, 0.5]`.
pub fn boundary_crossing(controller: ControllerBlock) -> ExperimentConfig {
    let mut problem = scalar_problem(ConstraintKind::Inequality, 10.0, 1.0);
    problem.input_set = Some(InputSet::Box { lower: vec![-1.0], upper: vec![0.5] });
    let mut cfg = base(
        &format!("boundary_{}", controller.name()),
        scalar_plant(),
        problem,
        controller,
        ControllerGains::projected(1.0, 0.5),
        sim(12.0, 1e-3, 1),
    );
    cfg.simulation.reduced = true;
    cfg.simulation.certify = false;
    cfg.simulation.u0 = Some(vec![-1.0]);
    cfg
}

/// Ramp metering on the shipped network.
pub fn traffic(controller: ControllerBlock, noise: bool) -> ExperimentConfig {
    let name = format!("traffic_{}{}", controller.name(), if noise { "_noise" } else { "" });
    ExperimentConfig {
        name,
        seed: 7,
        plant: None,
        network: Some(NetworkBlock {
            path: None,
            builtin: Some("example".into()),
            u_ref: vec![4.0, 4.0],
            q_u: Some(vec![vec![2.0, 0.0], vec![0.0, 2.0]]),
            delta: crate::traffic::DEFAULT_DELTA,
            nu: 1e-2,
            noise: noise.then_some(NoiseBlock { amplitude: 0.3, knot_spacing: 20.0, seed: None }),
            ceiling_fraction: 0.9,
        }),
        problem: None,
        controller,
        gains: ControllerGains::projected(1.0, 0.4),
        simulation: SimulationBlock { transient: Some(100.0), certify: false, ..sim(300.0, 0.05, 20) },
        output_dir: None,
        base_dir: Default::default(),
    }
}

/// The MPC settings used on the traffic network.
pub fn traffic_mpc() -> MpcConfig {
    MpcConfig { horizon: 20.0, apply: 5.0, dt: 0.5, ..MpcConfig::default() }
}

/// The ALINEA gain used on the traffic network.
pub const TRAFFIC_ALINEA_GAIN: f64 = 0.1;

/// Projected primal-dual, ALINEA and MPC on the shipped network.
pub fn traffic_comparison(noise: bool) -> Vec<ExperimentConfig> {
    vec![
        traffic(ControllerBlock::ProjectedPd, noise),
        traffic(ControllerBlock::Alinea { gain: TRAFFIC_ALINEA_GAIN }, noise),
        traffic(ControllerBlock::Mpc(traffic_mpc()), noise),
    ]
}

/// Every named preset, for the CLI and config round-trip tests.
pub fn all() -> Vec<ExperimentConfig> {
    let mut v = vec![
        scalar_static(),
        scalar_sinusoid(0.1),
        two_link(),
        equality_scalar(),
        boundary_crossing(ControllerBlock::ProjectedPd),
        boundary_crossing(ControllerBlock::DiscontinuousPd { deltas: None }),
    ];
    v.extend(traffic_comparison(false));
    v.extend(traffic_comparison(true));
    v
}
