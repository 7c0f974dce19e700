//! Saddle-point / KKT oracle. Inequality problems are warm-started with
//! extragradient steps and polished by semismooth Newton on the natural
//! residual `z − P_Ω(z − αF(z))`; equality problems use damped Newton on
//! the KKT system.

use nalgebra::{DMatrix, DVector};

use super::{ConstraintKind, ProblemError, TimeVaryingProblem};
use crate::linalg;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Bound on the KKT residual `‖z − P_Ω(z − F(z))‖`.
    pub tol: f64,
    /// Newton iteration cap.
    pub max_iter: usize,
    /// Extragradient warm-start steps.
    pub warm_start: usize,
    /// `false` solves the unregularized problem (`ν = 0`).
    pub regularized: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 500, warm_start: 100, regularized: true }
    }
}

impl SolveOptions {
    pub fn unregularized() -> Self {
        Self { regularized: false, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaddlePoint {
    pub u: DVector<f64>,
    pub lambda: DVector<f64>,
    /// `−A⁻¹(B u★ + E w_t)`; empty for algebraic maps.
    pub x: DVector<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
}

impl SaddlePoint {
    pub fn z(&self) -> DVector<f64> {
        linalg::concat(&self.u, &self.lambda)
    }

    /// `ξ★ = (x★, u★, λ★)`.
    pub fn xi(&self) -> DVector<f64> {
        linalg::concat(&self.x, &self.z())
    }
}

/// Both sides of `μ_u‖u★_ν − u★‖² + (ν/2)‖λ★_ν‖² ≤ (ν/2)‖λ★‖²` and of the
/// corollary `‖u★_ν − u★‖ ≤ √(ν/(2μ_u))‖λ★‖`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizationReport {
    pub nu: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
    pub distance: f64,
    pub distance_bound: f64,
    pub distance_pass: bool,
    pub regularized: SaddlePoint,
    pub exact: SaddlePoint,
}

/// Slack allowed on the regularization inequalities.
pub const REGULARIZATION_SLACK: f64 = 1e-8;

impl TimeVaryingProblem {
    pub fn solve_saddle_point(&self, t: f64, opts: &SolveOptions) -> Result<SaddlePoint, ProblemError> {
        let z0 = DVector::zeros(self.m() + self.r());
        self.solve_saddle_point_from(t, opts, &z0)
    }

    pub fn solve_saddle_point_from(
        &self,
        t: f64,
        opts: &SolveOptions,
        z0: &DVector<f64>,
    ) -> Result<SaddlePoint, ProblemError> {
        let (z, iterations) = match self.kind() {
            ConstraintKind::Inequality => {
                let nu = if opts.regularized { self.nu() } else { 0.0 };
                self.solve_projected(t, nu, opts, z0)?
            }
            ConstraintKind::Equality => self.solve_kkt(t, opts, z0)?,
        };
        let (u, lambda) = self.split(&z);
        let x = self.map().equilibrium_state(&u, &self.w(t));
        let nu = if opts.regularized { self.nu() } else { 0.0 };
        Ok(SaddlePoint { kkt_residual: self.kkt_residual(&z, t, nu), u, lambda, x, iterations })
    }

    /// `‖z − P_Ω(z − F(z))‖` for the given regularization weight.
    pub fn kkt_residual(&self, z: &DVector<f64>, t: f64, nu: f64) -> f64 {
        let f = self.saddle_map_with_nu(z, t, nu);
        (z - self.project_omega(&(z - f))).norm()
    }

    fn natural_residual(&self, z: &DVector<f64>, t: f64, nu: f64, alpha: f64) -> DVector<f64> {
        let f = self.saddle_map_with_nu(z, t, nu);
        z - self.project_omega(&(z - f * alpha))
    }

    fn extragradient(&self, z: &DVector<f64>, t: f64, nu: f64, alpha: f64) -> DVector<f64> {
        let half = self.project_omega(&(z - self.saddle_map_with_nu(z, t, nu) * alpha));
        self.project_omega(&(z - self.saddle_map_with_nu(&half, t, nu) * alpha))
    }

    fn solve_projected(
        &self,
        t: f64,
        nu: f64,
        opts: &SolveOptions,
        z0: &DVector<f64>,
    ) -> Result<(DVector<f64>, usize), ProblemError> {
        let n = z0.len();
        let alpha = 0.5 / self.lipschitz();
        let mut z = self.project_omega(z0);
        let mut iterations = 0;
        for _ in 0..opts.warm_start {
            if self.kkt_residual(&z, t, nu) < opts.tol {
                return Ok((z, iterations));
            }
            z = self.extragradient(&z, t, nu, alpha);
            iterations += 1;
        }
        let eye = DMatrix::<f64>::identity(n, n);
        for _ in 0..opts.max_iter {
            let candidate = self.project_omega(&z);
            if self.kkt_residual(&candidate, t, nu) < opts.tol {
                return Ok((candidate, iterations));
            }
            iterations += 1;
            let r = self.natural_residual(&z, t, nu, alpha);
            let r_norm = r.norm();
            let v = &z - self.saddle_map_with_nu(&z, t, nu) * alpha;
            let jac = &eye - self.omega_jacobian(&v) * (&eye - self.saddle_jacobian(&z, t, nu) * alpha);
            let step = jac.lu().solve(&(-&r)).filter(linalg::all_finite);
            let mut accepted = false;
            if let Some(dz) = step {
                let mut s = 1.0;
                while s > 1e-8 {
                    let trial = &z + &dz * s;
                    if self.natural_residual(&trial, t, nu, alpha).norm() <= (1.0 - 1e-4 * s) * r_norm {
                        z = trial;
                        accepted = true;
                        break;
                    }
                    s *= 0.5;
                }
            }
            if !accepted {
                for _ in 0..20 {
                    z = self.extragradient(&self.project_omega(&z), t, nu, alpha);
                }
            }
        }
        let z = self.project_omega(&z);
        let residual = self.kkt_residual(&z, t, nu);
        if residual < opts.tol {
            Ok((z, iterations))
        } else {
            Err(ProblemError::NoConvergence { residual, iterations })
        }
    }

    fn solve_kkt(&self, t: f64, opts: &SolveOptions, z0: &DVector<f64>) -> Result<(DVector<f64>, usize), ProblemError> {
        let kg = self.constraint().k(t) * &self.map().g;
        let (lo, hi) = linalg::symmetric_eigen_bounds(&(&kg * kg.transpose()));
        if lo <= 1e-12 * hi.max(1.0) {
            return Err(ProblemError::Infeasible(format!(
                "K G has rank below r (smallest eigenvalue of K G Gᵀ Kᵀ is {lo:e}) at t = {t}"
            )));
        }
        let mut z = z0.clone();
        let mut iterations = 0;
        for _ in 0..opts.max_iter {
            let f = self.saddle_map_with_nu(&z, t, 0.0);
            let f_norm = f.norm();
            if f_norm < opts.tol {
                return Ok((z, iterations));
            }
            iterations += 1;
            let jac = self.saddle_jacobian(&z, t, 0.0);
            let dz = jac.lu().solve(&(-&f)).filter(linalg::all_finite).ok_or_else(|| {
                ProblemError::Infeasible(format!("singular KKT matrix at t = {t}"))
            })?;
            let mut s = 1.0;
            loop {
                let trial = &z + &dz * s;
                if self.saddle_map_with_nu(&trial, t, 0.0).norm() <= (1.0 - 1e-4 * s) * f_norm || s < 1e-10 {
                    z = trial;
                    break;
                }
                s *= 0.5;
            }
        }
        let residual = self.saddle_map_with_nu(&z, t, 0.0).norm();
        if residual < opts.tol {
            Ok((z, iterations))
        } else {
            Err(ProblemError::NoConvergence { residual, iterations })
        }
    }

    /// Oracle solves at each time, in parallel. Static problems are solved once.
    pub fn solve_on_grid(&self, times: &[f64], opts: &SolveOptions) -> Result<Vec<SaddlePoint>, ProblemError> {
        if self.is_static() {
            let sp = self.solve_saddle_point(times.first().copied().unwrap_or(0.0), opts)?;
            return Ok(vec![sp; times.len()]);
        }
        par::map(times, |&t| self.solve_saddle_point(t, opts)).into_iter().collect()
    }

    /// Largest central-difference slope of `z★_t` over a grid on `[t0, t1]`.
    pub fn estimate_zstar_rate(
        &self,
        t0: f64,
        t1: f64,
        grid: f64,
        h: f64,
        opts: &SolveOptions,
    ) -> Result<f64, ProblemError> {
        if self.is_static() {
            return Ok(0.0);
        }
        let n = ((t1 - t0) / grid).ceil().max(0.0) as usize;
        let times: Vec<f64> = (0..=n).map(|k| (t0 + k as f64 * grid).min(t1)).collect();
        let slopes: Result<Vec<f64>, ProblemError> = par::map(&times, |&t| {
            let a = self.solve_saddle_point(t + h, opts)?;
            let b = self.solve_saddle_point_from(t - h, opts, &a.z())?;
            Ok((a.z() - b.z()).norm() / (2.0 * h))
        })
        .into_iter()
        .collect();
        Ok(slopes?.into_iter().fold(0.0, f64::max))
    }

    /// Compares the regularized and exact saddle points at time `t`.
    pub fn regularization_error_check(&self, t: f64) -> Result<RegularizationReport, ProblemError> {
        if self.kind() != ConstraintKind::Inequality {
            return Err(ProblemError::WrongKind("inequality"));
        }
        let regularized = self.solve_saddle_point(t, &SolveOptions::default())?;
        let exact = self.solve_saddle_point(t, &SolveOptions::unregularized())?;
        let nu = self.nu();
        let mu_u = self.cost().constants().mu_u;
        let distance = (&regularized.u - &exact.u).norm();
        let lhs = mu_u * distance * distance + 0.5 * nu * regularized.lambda.norm_squared();
        let rhs = 0.5 * nu * exact.lambda.norm_squared();
        let distance_bound = (nu / (2.0 * mu_u)).sqrt() * exact.lambda.norm();
        Ok(RegularizationReport {
            nu,
            lhs,
            rhs,
            pass: lhs <= rhs + REGULARIZATION_SLACK,
            distance,
            distance_bound,
            distance_pass: distance <= distance_bound + REGULARIZATION_SLACK,
            regularized,
            exact,
        })
    }
}
