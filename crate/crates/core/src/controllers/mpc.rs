//! Receding-horizon MPC on a forward-Euler discretization of a linear
//! prediction model. The condensed QP keeps the input constraint as a
//! projection and handles the output constraints with an augmented
//! Lagrangian; every subproblem is solved by accelerated projected gradient
//! with step `1/L`.

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::ControlError;
use crate::linalg;
use crate::plant::LtiPlant;
use crate::problem::{ConstraintKind, InputSet, TimeVaryingProblem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    /// Prediction horizon `T_p`.
    pub horizon: f64,
    /// Applied segment `T_s`.
    pub apply: f64,
    /// Discretization step.
    pub dt: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Quadratic penalty on output-constraint violation when the horizon is
    /// infeasible.
    pub penalty: f64,
    /// Soften infeasible horizons instead of failing.
    pub soften: bool,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self { horizon: 20.0, apply: 5.0, dt: 1.0, tol: 1e-8, max_iter: 100_000, penalty: 1e4, soften: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcPlan {
    /// Inputs for the applied segment, one per `dt`.
    pub inputs: Vec<DVector<f64>>,
    /// Predicted outputs `y_1..y_N`.
    pub predicted: Vec<DVector<f64>>,
    pub softened: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct MpcController {
    config: MpcConfig,
    problem: TimeVaryingProblem,
    n_steps: usize,
    n_apply: usize,
    /// Stacked `y_{k+1} = C x_{k+1}` response to the initial state.
    s: DMatrix<f64>,
    /// Stacked response to the input sequence (block lower triangular).
    t_mat: DMatrix<f64>,
    c_pinv: DMatrix<f64>,
}

fn steps(len: f64, dt: f64, what: &str) -> Result<usize, ControlError> {
    let k = (len / dt).round();
    if !(k >= 1.0) || ((len / dt) - k).abs() > 1e-9 {
        return Err(ControlError::InvalidGain(format!("dt = {dt} must divide {what} = {len}")));
    }
    Ok(k as usize)
}

impl MpcController {
    pub fn new(model: &LtiPlant, problem: &TimeVaryingProblem, config: MpcConfig) -> Result<Self, ControlError> {
        if problem.kind() != ConstraintKind::Inequality {
            return Err(ControlError::WrongKind("inequality"));
        }
        if model.m() != problem.m() || model.p() != problem.p() {
            return Err(ControlError::DimensionMismatch(format!(
                "prediction model has (m, p) = ({}, {}), problem has ({}, {})",
                model.m(),
                model.p(),
                problem.m(),
                problem.p()
            )));
        }
        if !(config.dt > 0.0) || config.apply > config.horizon {
            return Err(ControlError::InvalidGain(format!(
                "need dt > 0 and T_s <= T_p (got dt = {}, T_s = {}, T_p = {})",
                config.dt, config.apply, config.horizon
            )));
        }
        let n_steps = steps(config.horizon, config.dt, "T_p")?;
        let n_apply = steps(config.apply, config.dt, "T_s")?;
        let (n, m, p) = (model.n(), model.m(), model.p());
        let a_d = DMatrix::identity(n, n) + model.a() * config.dt;
        let b_d = model.b() * config.dt;
        let c = model.c();

        // Powers A_d^k, k = 0..N.
        let mut powers = vec![DMatrix::identity(n, n)];
        for k in 1..=n_steps {
            powers.push(&a_d * &powers[k - 1]);
        }
        let mut s = DMatrix::zeros(n_steps * p, n);
        let mut t_mat = DMatrix::zeros(n_steps * p, n_steps * m);
        for k in 0..n_steps {
            s.view_mut((k * p, 0), (p, n)).copy_from(&(c * &powers[k + 1]));
            for j in 0..=k {
                t_mat.view_mut((k * p, j * m), (p, m)).copy_from(&(c * &powers[k - j] * &b_d));
            }
        }
        let c_pinv = c.clone().pseudo_inverse(1e-12).map_err(|e| ControlError::DimensionMismatch(e.to_string()))?;
        Ok(Self { config, problem: problem.clone(), n_steps, n_apply, s, t_mat, c_pinv })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.config
    }

    pub fn horizon_steps(&self) -> usize {
        self.n_steps
    }

    pub fn applied_steps(&self) -> usize {
        self.n_apply
    }

    /// State estimate `C⁺ y` from a measured output.
    pub fn state_estimate(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.c_pinv * y
    }

    /// Solves the horizon QP from state `x_hat` at time `t`.
    pub fn plan(&self, x_hat: &DVector<f64>, t: f64) -> Result<MpcPlan, ControlError> {
        let (m, p, r, nh) = (self.problem.m(), self.problem.p(), self.problem.r(), self.n_steps);
        let dt = self.config.dt;
        let cost = self.problem.cost();
        let set = self.problem.input_set();
        let y0 = &self.s * x_hat;

        // Stacked constraints M U ≤ b over y_1..y_N.
        let mut k_blk = DMatrix::zeros(nh * r, nh * p);
        let mut e_stack = DVector::zeros(nh * r);
        for k in 0..nh {
            let tk = t + (k + 1) as f64 * dt;
            k_blk.view_mut((k * r, k * p), (r, p)).copy_from(&self.problem.constraint().k(tk));
            e_stack.rows_mut(k * r, r).copy_from(&self.problem.constraint().e(tk));
        }
        let mm = &k_blk * &self.t_mat;
        let b = e_stack - &k_blk * &y0;

        let grad_f = |u: &DVector<f64>| -> DVector<f64> {
            let y = &y0 + &self.t_mat * u;
            let mut g = DVector::zeros(nh * m);
            let mut gy = DVector::zeros(nh * p);
            for k in 0..nh {
                let uk = u.rows(k * m, m).into_owned();
                g.rows_mut(k * m, m).copy_from(&cost.grad_phi(&uk, t + k as f64 * dt));
                let yk = y.rows(k * p, p).into_owned();
                gy.rows_mut(k * p, p).copy_from(&cost.grad_psi(&yk, t + (k + 1) as f64 * dt));
            }
            g + self.t_mat.tr_mul(&gy)
        };
        let project = |u: &DVector<f64>| -> DVector<f64> {
            let mut out = u.clone();
            for k in 0..nh {
                let uk = u.rows(k * m, m).into_owned();
                out.rows_mut(k * m, m).copy_from(&set.project(&uk));
            }
            out
        };
        let c = cost.constants();
        let t_norm = linalg::spectral_norm(&self.t_mat);
        let l_f = c.ell_u + c.ell_y * t_norm * t_norm;
        let m_norm2 = linalg::spectral_norm(&mm).powi(2);
        let scale = grad_f(&DVector::zeros(nh * m)).norm().max(1.0);
        let tol = self.config.tol * scale;
        let feas_tol = self.config.tol * b.amax().max(1.0);
        let mut budget = self.config.max_iter;

        let mut u = project(&DVector::zeros(nh * m));
        let mut softened = obviously_infeasible(set, &mm, &b, feas_tol);
        if !softened {
            let mut mu = DVector::zeros(nh * r);
            let mut rho = 1.0;
            let mut prev_viol = f64::INFINITY;
            let mut solved = false;
            for _ in 0..60 {
                let grad = |v: &DVector<f64>| grad_f(v) + mm.tr_mul(&(&mu + (&mm * v - &b) * rho).map(|x| x.max(0.0)));
                u = fista(grad, &project, u, l_f + rho * m_norm2, tol, &mut budget)?;
                let slack = &mm * &u - &b;
                let viol = slack.map(|x| x.max(0.0)).amax();
                mu = (&mu + &slack * rho).map(|x| x.max(0.0));
                if viol <= feas_tol {
                    solved = true;
                    break;
                }
                if viol > 0.25 * prev_viol {
                    rho *= 10.0;
                }
                prev_viol = viol;
                if rho > 1e10 {
                    break;
                }
            }
            softened = !solved;
        }
        if softened {
            if !self.config.soften {
                return Err(ControlError::InfeasibleHorizon(format!("at t = {t}")));
            }
            debug!("MPC horizon infeasible at t = {t}; softening output constraints (penalty {})", self.config.penalty);
            let pen = self.config.penalty;
            let grad = |v: &DVector<f64>| grad_f(v) + mm.tr_mul(&(&mm * v - &b).map(|x| x.max(0.0))) * (2.0 * pen);
            u = fista(grad, &project, u, l_f + 2.0 * pen * m_norm2, tol, &mut budget)?;
        }
        let y = &y0 + &self.t_mat * &u;
        Ok(MpcPlan {
            inputs: (0..self.n_apply).map(|k| u.rows(k * m, m).into_owned()).collect(),
            predicted: (0..nh).map(|k| y.rows(k * p, p).into_owned()).collect(),
            softened,
            iterations: self.config.max_iter - budget,
        })
    }
}

/// `M ≥ 0`, `𝒰 ⊆ ℝ_{≥0}` and some `b_i < 0` certify an empty feasible set.
fn obviously_infeasible(set: &InputSet, mm: &DMatrix<f64>, b: &DVector<f64>, tol: f64) -> bool {
    let nonneg_inputs = match set {
        InputSet::NonnegOrthant { .. } => true,
        InputSet::Box { lower, .. } => lower.iter().all(|&l| l >= 0.0),
        _ => false,
    };
    nonneg_inputs && mm.iter().all(|&v| v >= -1e-15) && b.iter().any(|&v| v < -tol)
}

/// Accelerated projected gradient with adaptive restart, step `1/L`.
/// Stops when the gradient mapping `L‖y − P(y − ∇/L)‖` drops below `tol`.
fn fista<G, P>(
    grad: G,
    project: &P,
    x0: DVector<f64>,
    lipschitz: f64,
    tol: f64,
    budget: &mut usize,
) -> Result<DVector<f64>, ControlError>
where
    G: Fn(&DVector<f64>) -> DVector<f64>,
    P: Fn(&DVector<f64>) -> DVector<f64>,
{
    let step = 1.0 / lipschitz;
    let mut x = project(&x0);
    let mut y = x.clone();
    let mut theta = 1.0_f64;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while *budget > 0 {
        *budget -= 1;
        iterations += 1;
        let x_new = project(&(&y - grad(&y) * step));
        residual = (&y - &x_new).norm() * lipschitz;
        if residual <= tol {
            return Ok(x_new);
        }
        if (&y - &x_new).dot(&(&x_new - &x)) > 0.0 {
            theta = 1.0;
            y = x_new.clone();
        } else {
            let theta_new = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
            y = &x_new + (&x_new - &x) * ((theta - 1.0) / theta_new);
            theta = theta_new;
        }
        x = x_new;
    }
    Err(ControlError::QpNoConvergence { residual, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{OutputConstraint, QuadraticCost};
    use crate::signal::{DisturbanceSignal, VectorSignal};
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn scalar(u_ref: f64, ceiling: f64) -> (LtiPlant, TimeVaryingProblem) {
        let one = DMatrix::from_element(1, 1, 1.0);
        let plant = LtiPlant::new(DMatrix::from_element(1, 1, -0.5), one.clone(), one.clone(), one.clone(), DMatrix::zeros(1, 1))
            .unwrap();
        let map = plant.steady_state_map().unwrap();
        let cost = QuadraticCost::input_only(DMatrix::from_element(1, 1, 2.0), VectorSignal::constant(&[u_ref]), 1).unwrap();
        let problem = TimeVaryingProblem::new(
            Arc::new(cost),
            OutputConstraint::constant(ConstraintKind::Inequality, one, VectorSignal::constant(&[ceiling])).unwrap(),
            InputSet::NonnegOrthant { dim: 1 },
            1e-3,
            map,
            DisturbanceSignal::zeros(1),
        )
        .unwrap();
        (plant, problem)
    }

    #[test]
    fn horizon_lengths() {
        let (plant, problem) = scalar(1.0, 100.0);
        let mpc = MpcController::new(&plant, &problem, MpcConfig::default()).unwrap();
        assert_eq!(mpc.horizon_steps(), 20);
        assert_eq!(mpc.applied_steps(), 5);
        let plan = mpc.plan(&DVector::zeros(1), 0.0).unwrap();
        assert_eq!(plan.inputs.len(), 5);
        assert_eq!(plan.predicted.len(), 20);
    }

    #[test]
    fn zero_demand_gives_zero_inputs() {
        let (plant, problem) = scalar(0.0, 100.0);
        let mpc = MpcController::new(&plant, &problem, MpcConfig::default()).unwrap();
        let plan = mpc.plan(&DVector::zeros(1), 0.0).unwrap();
        assert!(plan.inputs.iter().all(|u| u[0] == 0.0));
    }

    #[test]
    fn loose_constraints_track_reference() {
        let (plant, problem) = scalar(1.5, 100.0);
        let mpc = MpcController::new(&plant, &problem, MpcConfig::default()).unwrap();
        let plan = mpc.plan(&DVector::zeros(1), 0.0).unwrap();
        assert_relative_eq!(plan.inputs[0][0], 1.5, epsilon = 1e-8);
        assert!(!plan.softened);
    }

    #[test]
    fn active_constraint_respected() {
        // Steady state x = 2u; ceiling 1 forces u <= 0.5 in the long run.
        let (plant, problem) = scalar(1.5, 1.0);
        let mpc = MpcController::new(&plant, &problem, MpcConfig::default()).unwrap();
        let plan = mpc.plan(&DVector::zeros(1), 0.0).unwrap();
        assert!(plan.predicted.iter().all(|y| y[0] <= 1.0 + 1e-7));
        assert!(plan.inputs.iter().all(|u| u[0] >= 0.0));
        assert!(!plan.softened);
    }

    #[test]
    fn infeasible_start_is_softened() {
        let (plant, problem) = scalar(1.0, 1.0);
        let mpc = MpcController::new(&plant, &problem, MpcConfig::default()).unwrap();
        let plan = mpc.plan(&DVector::from_element(1, 5.0), 0.0).unwrap();
        assert!(plan.softened);
        let strict = MpcController::new(&plant, &problem, MpcConfig { soften: false, ..MpcConfig::default() }).unwrap();
        assert!(matches!(strict.plan(&DVector::from_element(1, 5.0), 0.0), Err(ControlError::InfeasibleHorizon(_))));
    }

    #[test]
    fn rejects_bad_timing() {
        let (plant, problem) = scalar(1.0, 1.0);
        let cfg = MpcConfig { apply: 30.0, ..MpcConfig::default() };
        assert!(MpcController::new(&plant, &problem, cfg).is_err());
        let cfg = MpcConfig { dt: 0.3, ..MpcConfig::default() };
        assert!(MpcController::new(&plant, &problem, cfg).is_err());
    }
}
