//! The time-varying optimization problem: costs on inputs and outputs, an
//! output constraint `K_t y ≤ e_t` (or `= e_t`), an input set and the
//! ν-regularized saddle map, plus a high-accuracy saddle-point oracle.

mod cost;
mod oracle;
mod sets;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cost::{fd_jacobian, spot_check_cost, CallbackCost, CostCheck, CostConstants, CostModel, QuadraticCost};
pub use oracle::{RegularizationReport, SaddlePoint, SolveOptions};
pub use sets::{orthant_jacobian, project_orthant, InputSet};

use crate::linalg;
use crate::par;
use crate::plant::SteadyStateMap;
use crate::signal::{DisturbanceSignal, MatrixSignal, VectorSignal};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("input cost must be strongly convex (mu_u = {mu_u})")]
    NotStronglyConvex { mu_u: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unsupported set: {0}")]
    UnsupportedSet(String),
    #[error("declared bound violated: {0}")]
    BoundViolated(String),
    #[error("oracle did not converge: residual {residual:e} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },
    #[error("equality constraints are infeasible: {0}")]
    Infeasible(String),
    #[error("declared constants contradicted by samples: {0}")]
    ConstantViolated(String),
    #[error("operation requires a problem with {0} constraints")]
    WrongKind(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    Inequality,
    Equality,
}

/// `K_t y ≤ e_t` or `K_t y = e_t` with uniform bounds `‖K_t‖ ≤ K̄`, `‖e_t‖ ≤ ē`.
#[derive(Debug, Clone)]
pub struct OutputConstraint {
    kind: ConstraintKind,
    k: MatrixSignal,
    e: VectorSignal,
    k_bar: f64,
    e_bar: f64,
    eigen_bounds: Option<(f64, f64)>,
}

impl OutputConstraint {
    /// Constant `K`; `K̄` and `ē` are computed.
    pub fn constant(kind: ConstraintKind, k: DMatrix<f64>, e: VectorSignal) -> Result<Self, ProblemError> {
        let k_bar = linalg::spectral_norm(&k);
        let e_bar = e.sup_abs().ok_or_else(|| {
            ProblemError::InvalidParameter("callback e_t needs a declared bound; use OutputConstraint::time_varying".into())
        })?;
        Self::time_varying(kind, MatrixSignal::Constant(k), e, k_bar, e_bar)
    }

    /// `K_t`, `e_t` with declared bounds, spot-checked later against samples.
    pub fn time_varying(
        kind: ConstraintKind,
        k: MatrixSignal,
        e: VectorSignal,
        k_bar: f64,
        e_bar: f64,
    ) -> Result<Self, ProblemError> {
        let (r, _) = k.shape();
        if e.dim() != r {
            return Err(ProblemError::DimensionMismatch(format!("K has {r} rows but e has dimension {}", e.dim())));
        }
        if !(k_bar >= 0.0 && e_bar >= 0.0) {
            return Err(ProblemError::InvalidParameter("constraint bounds must be nonnegative".into()));
        }
        Ok(Self { kind, k, e, k_bar, e_bar, eigen_bounds: None })
    }

    /// Declares `k̲ I ⪯ K_t G Gᵀ K_tᵀ ⪯ k̄ I` for time-varying equality constraints.
    pub fn with_eigen_bounds(mut self, lower: f64, upper: f64) -> Self {
        self.eigen_bounds = Some((lower, upper));
        self
    }

    /// An inert single-row inequality `0·y ≤ 0`.
    pub fn inactive(p: usize) -> Self {
        Self::constant(ConstraintKind::Inequality, DMatrix::zeros(1, p), VectorSignal::zeros(1))
            .expect("constant zero constraint is valid")
    }

    pub fn kind(&self) -> ConstraintKind {
        self.kind
    }

    pub fn r(&self) -> usize {
        self.k.shape().0
    }

    pub fn p(&self) -> usize {
        self.k.shape().1
    }

    pub fn k(&self, t: f64) -> DMatrix<f64> {
        self.k.value(t)
    }

    pub fn e(&self, t: f64) -> DVector<f64> {
        self.e.value(t)
    }

    pub fn k_signal(&self) -> &MatrixSignal {
        &self.k
    }

    pub fn e_signal(&self) -> &VectorSignal {
        &self.e
    }

    pub fn k_bar(&self) -> f64 {
        self.k_bar
    }

    pub fn e_bar(&self) -> f64 {
        self.e_bar
    }

    pub fn eigen_bounds(&self) -> Option<(f64, f64)> {
        self.eigen_bounds
    }

    pub fn is_constant(&self) -> bool {
        self.k.as_constant().is_some() && self.e.is_constant()
    }

    /// Checks the declared bounds at the given times.
    pub fn spot_check(&self, g: &DMatrix<f64>, times: &[f64]) -> Result<(), ProblemError> {
        const TOL: f64 = 1e-9;
        for &t in times {
            let k = self.k(t);
            let kn = linalg::spectral_norm(&k);
            if kn > self.k_bar * (1.0 + TOL) + TOL {
                return Err(ProblemError::BoundViolated(format!("|K_t| = {kn} > {} at t = {t}", self.k_bar)));
            }
            let en = self.e(t).norm();
            if en > self.e_bar * (1.0 + TOL) + TOL {
                return Err(ProblemError::BoundViolated(format!("|e_t| = {en} > {} at t = {t}", self.e_bar)));
            }
            if let (ConstraintKind::Equality, Some((lo, hi))) = (self.kind, self.eigen_bounds) {
                let kg = &k * g;
                let (emin, emax) = linalg::symmetric_eigen_bounds(&(&kg * kg.transpose()));
                if emin < lo * (1.0 - TOL) - TOL || emax > hi * (1.0 + TOL) + TOL {
                    return Err(ProblemError::BoundViolated(format!(
                        "eig(K G Gᵀ Kᵀ) = [{emin}, {emax}] outside [{lo}, {hi}] at t = {t}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Monte Carlo estimates of the monotonicity modulus and Lipschitz constant
/// of the saddle map next to the analytic values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantEstimate {
    pub mu_hat: f64,
    pub ell_hat: f64,
    pub mu: f64,
    pub ell: f64,
    pub samples: usize,
}

#[derive(Debug, Clone)]
pub struct TimeVaryingProblem {
    cost: Arc<dyn CostModel>,
    constraint: OutputConstraint,
    input_set: InputSet,
    nu: f64,
    map: SteadyStateMap,
    disturbance: DisturbanceSignal,
}

impl TimeVaryingProblem {
    pub fn new(
        cost: Arc<dyn CostModel>,
        mut constraint: OutputConstraint,
        input_set: InputSet,
        nu: f64,
        map: SteadyStateMap,
        disturbance: DisturbanceSignal,
    ) -> Result<Self, ProblemError> {
        input_set.validate()?;
        let (m, p, q) = (map.input_dim(), map.output_dim(), map.disturbance_dim());
        let mut problems = Vec::new();
        if cost.input_dim() != m {
            problems.push(format!("cost expects {} inputs, G has {m} columns", cost.input_dim()));
        }
        if cost.output_dim() != p {
            problems.push(format!("cost expects {} outputs, G has {p} rows", cost.output_dim()));
        }
        if input_set.dim() != m {
            problems.push(format!("input set has dimension {}, expected {m}", input_set.dim()));
        }
        if constraint.p() != p {
            problems.push(format!("K has {} columns, expected {p}", constraint.p()));
        }
        if disturbance.dim() != q {
            problems.push(format!("disturbance has dimension {}, H has {q} columns", disturbance.dim()));
        }
        if !problems.is_empty() {
            return Err(ProblemError::DimensionMismatch(problems.join("; ")));
        }
        cost.constants().validate()?;
        match constraint.kind() {
            ConstraintKind::Inequality => {
                if !(nu > 0.0) || !nu.is_finite() {
                    return Err(ProblemError::InvalidParameter(format!(
                        "inequality problems need a regularization weight nu > 0, got {nu}"
                    )));
                }
            }
            ConstraintKind::Equality => {
                if nu != 0.0 {
                    return Err(ProblemError::InvalidParameter("equality problems take nu = 0".into()));
                }
                if !input_set.is_full_space() {
                    return Err(ProblemError::InvalidParameter("equality problems use the full input space".into()));
                }
                if constraint.eigen_bounds().is_none() {
                    let k = constraint.k_signal().as_constant().ok_or_else(|| {
                        ProblemError::InvalidParameter("time-varying equality constraints need declared eigenvalue bounds".into())
                    })?;
                    let kg = k * &map.g;
                    let (lo, hi) = linalg::symmetric_eigen_bounds(&(&kg * kg.transpose()));
                    constraint.eigen_bounds = Some((lo, hi));
                }
            }
        }
        Ok(Self { cost, constraint, input_set, nu, map, disturbance })
    }

    pub fn cost(&self) -> &dyn CostModel {
        self.cost.as_ref()
    }

    pub fn constraint(&self) -> &OutputConstraint {
        &self.constraint
    }

    pub fn input_set(&self) -> &InputSet {
        &self.input_set
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn map(&self) -> &SteadyStateMap {
        &self.map
    }

    pub fn disturbance(&self) -> &DisturbanceSignal {
        &self.disturbance
    }

    pub fn kind(&self) -> ConstraintKind {
        self.constraint.kind()
    }

    pub fn m(&self) -> usize {
        self.map.input_dim()
    }

    pub fn p(&self) -> usize {
        self.map.output_dim()
    }

    pub fn r(&self) -> usize {
        self.constraint.r()
    }

    pub fn w(&self, t: f64) -> DVector<f64> {
        self.disturbance.value(t)
    }

    /// True when nothing depends on time.
    pub fn is_static(&self) -> bool {
        self.cost.is_static() && self.constraint.is_constant() && self.disturbance.is_constant()
    }

    /// Same problem with a different regularization weight.
    pub fn with_nu(&self, nu: f64) -> Result<Self, ProblemError> {
        Self::new(
            self.cost.clone(),
            self.constraint.clone(),
            self.input_set.clone(),
            nu,
            self.map.clone(),
            self.disturbance.clone(),
        )
    }

    /// Same problem with a different disturbance.
    pub fn with_disturbance(&self, disturbance: DisturbanceSignal) -> Result<Self, ProblemError> {
        Self::new(
            self.cost.clone(),
            self.constraint.clone(),
            self.input_set.clone(),
            self.nu,
            self.map.clone(),
            disturbance,
        )
    }

    /// Steady-state output `G u + H w_t`.
    pub fn steady_output(&self, u: &DVector<f64>, t: f64) -> DVector<f64> {
        self.map.output(u, &self.w(t))
    }

    pub fn split(&self, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let m = self.m();
        (z.rows(0, m).into_owned(), z.rows(m, z.len() - m).into_owned())
    }

    pub fn stack(&self, u: &DVector<f64>, lambda: &DVector<f64>) -> DVector<f64> {
        linalg::concat(u, lambda)
    }

    fn check_dims(&self, u: &DVector<f64>, y: &DVector<f64>, lambda: &DVector<f64>) {
        assert!(
            u.len() == self.m() && y.len() == self.p() && lambda.len() == self.r(),
            "dimension mismatch: u {} (m = {}), y {} (p = {}), lambda {} (r = {})",
            u.len(),
            self.m(),
            y.len(),
            self.p(),
            lambda.len(),
            self.r()
        );
    }

    /// `L_u = ∇φ_t(u) + Gᵀ∇ψ_t(y) + GᵀK_tᵀλ` and `L_λ = K_t y − e_t − νλ`
    /// at a measured output `y`.
    pub fn modified_gradients(
        &self,
        u: &DVector<f64>,
        y: &DVector<f64>,
        lambda: &DVector<f64>,
        t: f64,
    ) -> (DVector<f64>, DVector<f64>) {
        self.check_dims(u, y, lambda);
        self.gradients_with_nu(u, y, lambda, t, self.nu)
    }

    fn gradients_with_nu(
        &self,
        u: &DVector<f64>,
        y: &DVector<f64>,
        lambda: &DVector<f64>,
        t: f64,
        nu: f64,
    ) -> (DVector<f64>, DVector<f64>) {
        let k = self.constraint.k(t);
        let g = &self.map.g;
        let l_u = self.cost.grad_phi(u, t) + g.tr_mul(&(self.cost.grad_psi(y, t) + k.tr_mul(lambda)));
        let l_lambda = &k * y - self.constraint.e(t) - lambda * nu;
        (l_u, l_lambda)
    }

    /// `F_t(z) = [L_u; −L_λ]` at the steady-state output.
    pub fn saddle_map(&self, z: &DVector<f64>, t: f64) -> DVector<f64> {
        self.saddle_map_with_nu(z, t, self.nu)
    }

    pub(crate) fn saddle_map_with_nu(&self, z: &DVector<f64>, t: f64, nu: f64) -> DVector<f64> {
        let (u, lambda) = self.split(z);
        assert_eq!(lambda.len(), self.r(), "z has the wrong dimension");
        let y = self.steady_output(&u, t);
        let (l_u, l_lambda) = self.gradients_with_nu(&u, &y, &lambda, t, nu);
        linalg::concat(&l_u, &(-l_lambda))
    }

    /// `J_F = [[∇²φ + Gᵀ∇²ψ G, GᵀKᵀ], [−KG, νI]]`.
    pub fn saddle_jacobian(&self, z: &DVector<f64>, t: f64, nu: f64) -> DMatrix<f64> {
        let (u, _) = self.split(z);
        let (m, r) = (self.m(), self.r());
        let g = &self.map.g;
        let y = self.steady_output(&u, t);
        let kg = self.constraint.k(t) * g;
        let mut j = DMatrix::zeros(m + r, m + r);
        let huu = self.cost.hess_phi(&u, t) + g.transpose() * self.cost.hess_psi(&y, t) * g;
        j.view_mut((0, 0), (m, m)).copy_from(&huu);
        j.view_mut((0, m), (m, r)).copy_from(&kg.transpose());
        j.view_mut((m, 0), (r, m)).copy_from(&(-&kg));
        j.view_mut((m, m), (r, r)).fill_with_identity();
        j.view_mut((m, m), (r, r)).scale_mut(nu);
        j
    }

    /// Projection onto `Ω = 𝒰 × ℝ^r_{≥0}` (inequality) or the identity
    /// (equality).
    pub fn project_omega(&self, z: &DVector<f64>) -> DVector<f64> {
        match self.kind() {
            ConstraintKind::Equality => z.clone(),
            ConstraintKind::Inequality => {
                let (u, lambda) = self.split(z);
                linalg::concat(&self.input_set.project(&u), &project_orthant(&lambda))
            }
        }
    }

    pub(crate) fn omega_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let n = z.len();
        match self.kind() {
            ConstraintKind::Equality => DMatrix::identity(n, n),
            ConstraintKind::Inequality => {
                let (u, lambda) = self.split(z);
                let m = self.m();
                let mut j = DMatrix::zeros(n, n);
                j.view_mut((0, 0), (m, m)).copy_from(&self.input_set.projection_jacobian(&u));
                j.view_mut((m, m), (n - m, n - m)).copy_from(&orthant_jacobian(&lambda));
                j
            }
        }
    }

    /// `μ = min{μ_u, ν}` (inequality) or `μ_u` (equality).
    pub fn monotonicity(&self) -> f64 {
        let mu_u = self.cost.constants().mu_u;
        match self.kind() {
            ConstraintKind::Inequality => mu_u.min(self.nu),
            ConstraintKind::Equality => mu_u,
        }
    }

    /// Analytic Lipschitz constant of `F_t`:
    /// `√2 (K̄·max{1, ‖G‖} + max{ℓ_u + ‖G‖²ℓ_y, ν})`.
    pub fn lipschitz(&self) -> f64 {
        let c = self.cost.constants();
        let gn = linalg::spectral_norm(&self.map.g);
        std::f64::consts::SQRT_2 * (self.constraint.k_bar() * gn.max(1.0) + (c.ell_u + gn * gn * c.ell_y).max(self.nu))
    }

    /// Samples `sample_count` pairs `(z, z′)` in `[-radius, radius]^{m+r}` and
    /// times in `t_range`, estimates `μ̂` and `ℓ̂`, and checks them against
    /// [`Self::monotonicity`] and [`Self::lipschitz`].
    pub fn estimate_constants(
        &self,
        sample_count: usize,
        radius: f64,
        t_range: (f64, f64),
        seed: u64,
    ) -> Result<ConstantEstimate, ProblemError> {
        if sample_count < 100 {
            return Err(ProblemError::InvalidParameter(format!("need at least 100 samples, got {sample_count}")));
        }
        let n = self.m() + self.r();
        let ratios = par::map_range(sample_count, |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let z = DVector::from_fn(n, |_, _| rng.random_range(-radius..=radius));
            let zp = DVector::from_fn(n, |_, _| rng.random_range(-radius..=radius));
            let t = if t_range.1 > t_range.0 { rng.random_range(t_range.0..=t_range.1) } else { t_range.0 };
            let dz = &z - &zp;
            let df = self.saddle_map(&z, t) - self.saddle_map(&zp, t);
            let n2 = dz.norm_squared();
            (dz.dot(&df) / n2, df.norm() / n2.sqrt())
        });
        let mu_hat = ratios.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
        let ell_hat = ratios.iter().map(|r| r.1).fold(0.0, f64::max);
        let est = ConstantEstimate {
            mu_hat,
            ell_hat,
            mu: self.monotonicity(),
            ell: self.lipschitz(),
            samples: sample_count,
        };
        if est.mu_hat < est.mu - 1e-6 || est.ell_hat > est.ell + 1e-6 {
            return Err(ProblemError::ConstantViolated(format!(
                "sampled mu = {}, ell = {} against analytic mu = {}, ell = {}",
                est.mu_hat, est.ell_hat, est.mu, est.ell
            )));
        }
        Ok(est)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// `φ = (u−1)²`, `ψ = 0`, `G = H = 1`, `K = 1`, `e`, `ν`.
    pub(crate) fn scalar_problem(e: f64, nu: f64) -> TimeVaryingProblem {
        let cost = QuadraticCost::input_only(DMatrix::from_element(1, 1, 2.0), VectorSignal::constant(&[1.0]), 1).unwrap();
        let constraint =
            OutputConstraint::constant(ConstraintKind::Inequality, DMatrix::identity(1, 1), VectorSignal::constant(&[e]))
                .unwrap();
        let map = SteadyStateMap::algebraic(DMatrix::identity(1, 1), DMatrix::identity(1, 1));
        TimeVaryingProblem::new(
            Arc::new(cost),
            constraint,
            InputSet::FullSpace { dim: 1 },
            nu,
            map,
            DisturbanceSignal::zeros(1),
        )
        .unwrap()
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn saddle_map_examples() {
        let p = scalar_problem(0.0, 0.1);
        assert_eq!(p.saddle_map(&v(&[0.0, 0.0]), 0.0), v(&[-2.0, 0.0]));
        let f = p.saddle_map(&v(&[1.0, 1.0]), 0.0);
        assert_relative_eq!(f[0], 1.0);
        assert_relative_eq!(f[1], -0.9);
    }

    #[test]
    fn modified_gradients_consistency_and_linearity() {
        let p = scalar_problem(0.0, 0.1);
        let (u, l) = (v(&[0.4]), v(&[0.7]));
        let y = p.steady_output(&u, 0.0);
        let (lu, ll) = p.modified_gradients(&u, &y, &l, 0.0);
        let f = p.saddle_map(&p.stack(&u, &l), 0.0);
        assert_relative_eq!(lu[0], f[0]);
        assert_relative_eq!(ll[0], -f[1]);
        let (_, ll2) = p.modified_gradients(&u, &(&y + v(&[0.25])), &l, 0.0);
        assert_relative_eq!(ll2[0] - ll[0], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn jacobian_matches_finite_difference() {
        let p = scalar_problem(0.0, 0.1);
        let z = v(&[0.3, 0.5]);
        let j = p.saddle_jacobian(&z, 0.0, 0.1);
        let h = 1e-6;
        for k in 0..2 {
            let mut a = z.clone();
            let mut b = z.clone();
            a[k] += h;
            b[k] -= h;
            let col = (p.saddle_map(&a, 0.0) - p.saddle_map(&b, 0.0)) / (2.0 * h);
            for i in 0..2 {
                assert_relative_eq!(j[(i, k)], col[i], epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn constants_hold_on_scalar_problem() {
        let p = scalar_problem(0.0, 0.1);
        let est = p.estimate_constants(1000, 5.0, (0.0, 0.0), 3).unwrap();
        assert!(est.mu_hat >= 0.1 - 1e-9);
        assert!(est.ell_hat <= 4.0 * std::f64::consts::SQRT_2);
        assert!(p.estimate_constants(10, 1.0, (0.0, 0.0), 3).is_err());
    }

    #[test]
    fn decoupled_blocks_modulus() {
        let cost = QuadraticCost::input_only(DMatrix::from_element(1, 1, 2.0), VectorSignal::zeros(1), 1).unwrap();
        let p = TimeVaryingProblem::new(
            Arc::new(cost),
            OutputConstraint::inactive(1),
            InputSet::FullSpace { dim: 1 },
            1.0,
            SteadyStateMap::algebraic(DMatrix::identity(1, 1), DMatrix::identity(1, 1)),
            DisturbanceSignal::zeros(1),
        )
        .unwrap();
        let est = p.estimate_constants(500, 2.0, (0.0, 0.0), 9).unwrap();
        assert_relative_eq!(est.mu_hat, 1.0, epsilon = 0.05);
    }

    #[test]
    fn validation() {
        let p = scalar_problem(0.0, 0.1);
        assert!(matches!(p.with_nu(0.0), Err(ProblemError::InvalidParameter(_))));
        let cost = QuadraticCost::input_only(DMatrix::from_element(1, 1, 2.0), VectorSignal::zeros(1), 2).unwrap();
        let err = TimeVaryingProblem::new(
            Arc::new(cost),
            OutputConstraint::inactive(1),
            InputSet::FullSpace { dim: 1 },
            1.0,
            SteadyStateMap::algebraic(DMatrix::identity(1, 1), DMatrix::identity(1, 1)),
            DisturbanceSignal::zeros(1),
        );
        assert!(matches!(err, Err(ProblemError::DimensionMismatch(_))));
    }

    #[test]
    fn time_varying_bounds_spot_checked() {
        let k = MatrixSignal::from_fn(1, 1, |t| DMatrix::from_element(1, 1, 1.0 + 0.5 * t.sin()));
        let c = OutputConstraint::time_varying(ConstraintKind::Inequality, k, VectorSignal::zeros(1), 1.2, 0.0).unwrap();
        let times: Vec<f64> = (0..50).map(|i| i as f64 * 0.2).collect();
        assert!(matches!(
            c.spot_check(&DMatrix::identity(1, 1), &times),
            Err(ProblemError::BoundViolated(_))
        ));
    }
}
